"""Experiment orchestration: simulate, reconstruct, train, fuse, evaluate.

Every stage failure surfaces as a StageError naming the stage.  All seeds
derive from the experiment seed, so a rerun with the same config is
byte-identical.  Wall-clock timings are collected in the Report but only
persisted on request, keeping the default artifacts deterministic.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import flow, fusion, geometry, pgo, rpr, sim
from ..cells import TrainConfig
from ..errors import StageError
from ..geometry import (
    Pose,
    improvement_percent,
    median_orientation_error,
    median_position_error,
    quat_from_matrix,
    quat_to_matrix,
    save_pose_stream,
    save_relative_stream,
    umeyama_alignment,
)
from ..sfm import (
    PointCloud,
    localize_query,
    reconstruct,
    save_matches_csv,
    save_point_cloud,
)
from .config import ExperimentConfig, ScenarioConfig

REPORT_HEADER = "method,median_pos_m,median_ori_deg,improvement_pct"
POOL_K = 4


@dataclass
class ReportRow:
    method: str
    median_pos_m: float
    median_ori_deg: float
    improvement_pct: float
    runtime_s: float


@dataclass
class Report:
    rows: list = field(default_factory=list)

    def row(self, name: str):
        for r in self.rows:
            if r.method == name:
                return r
        raise KeyError(name)


def write_report(path, report: Report, include_runtime: bool = False) -> None:
    header = REPORT_HEADER + (",runtime_s" if include_runtime else "")
    lines = [header]
    for r in report.rows:
        line = (f"{r.method},{float(r.median_pos_m)!r},{float(r.median_ori_deg)!r},"
                f"{float(r.improvement_pct)!r}")
        if include_runtime:
            line += f",{float(r.runtime_s)!r}"
        lines.append(line)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# --- scenario realization -------------------------------------------------------


def simulate_split(scenario: ScenarioConfig, seed: int, duration: float):
    """One trajectory with ground truth, degraded absolute, exact relative."""
    gt = sim.generate_trajectory(scenario.profile, duration, scenario.rate,
                                 seed, scenario.scene)
    degraded, flags = sim.degrade_absolute(
        gt, scenario.sigma_p, scenario.sigma_q, scenario.outlier_rate,
        scenario.outlier_mag, seed + 1_000_003,
    )
    rel = sim.exact_relative_stream(gt)
    return gt, degraded, rel, flags


def camera_rig(scene: sim.SceneSpec, n: int = 10, seed: int = 0) -> list:
    """Reconstruction rig: an arc of inward-looking cameras."""
    center = scene.center()
    xmin, xmax, ymin, ymax, zmin, zmax = scene.box
    radius = 0.35 * min(xmax - xmin, ymax - ymin)
    rng = np.random.default_rng(seed)
    cams = []
    for i in range(n):
        ang = np.pi * (0.25 + 0.5 * i / max(1, n - 1))
        eye = center + np.array([
            radius * np.cos(ang), radius * np.sin(ang),
            -0.2 * (zmax - zmin) + 0.04 * (zmax - zmin) * i,
        ])
        target = center + np.array([
            0.1 * radius * (rng.random() - 0.5),
            0.1 * radius * (rng.random() - 0.5),
            0.0,
        ])
        cams.append(sim.look_at_pose(eye, target))
    return cams


def align_cloud_to_world(cloud: PointCloud, gt_rig: dict) -> PointCloud:
    """Similarity-align a reconstruction to ground-truth rig positions."""
    ids = sorted(set(cloud.cameras) & set(gt_rig))
    if len(ids) < 3:
        raise StageError("sfm", "too few shared cameras for gauge alignment")
    rec = np.array([cloud.cameras[i].p for i in ids])
    gt = np.array([gt_rig[i].p for i in ids])
    s, R, t = umeyama_alignment(rec, gt)
    landmarks = {lid: s * R @ X + t for lid, X in cloud.landmarks.items()}
    cameras = {}
    for cid, pose in cloud.cameras.items():
        cameras[cid] = Pose(s * R @ pose.p + t,
                            quat_from_matrix(R @ quat_to_matrix(pose.q)))
    return PointCloud(landmarks, cameras, cloud.intrinsics)


def sfm_absolute_stream(scenario: ScenarioConfig, cfg: ExperimentConfig,
                        gt_stream: list, seed: int) -> list:
    """Absolute poses from reconstruction plus per-frame query localization."""
    scene = scenario.scene
    landmarks = sim.generate_landmarks(scene, seed)
    rig = camera_rig(scene, n=10, seed=seed + 1)
    matchsets = sim.synth_matches_multi(
        landmarks, rig, sim.DEFAULT_INTRINSICS, scenario.sigma_px,
        scenario.match_outlier_rate, seed + 2,
    )
    cloud, tracks, _ = reconstruct(matchsets, sim.DEFAULT_INTRINSICS, cfg.sfm,
                                   seed=seed + 3)
    cloud = align_cloud_to_world(cloud, dict(enumerate(rig)))
    # ground-truth landmark id per track from the match bookkeeping
    pixel_to_lm = {}
    for ms in matchsets:
        for i in range(len(ms.xy_a)):
            if ms.landmark_id[i] >= 0:
                pixel_to_lm[(ms.img_a, float(ms.xy_a[i, 0]), float(ms.xy_a[i, 1]))] = \
                    int(ms.landmark_id[i])
                if not ms.is_outlier[i]:
                    pixel_to_lm[(ms.img_b, float(ms.xy_b[i, 0]), float(ms.xy_b[i, 1]))] = \
                        int(ms.landmark_id[i])
    lm_to_cloud = {}
    for track in tracks:
        if track.track_id not in cloud.landmarks:
            continue
        votes = {}
        for img, xy in track.observations:
            lid = pixel_to_lm.get((img, float(xy[0]), float(xy[1])))
            if lid is not None:
                votes[lid] = votes.get(lid, 0) + 1
        if votes:
            lm_to_cloud[max(votes, key=votes.get)] = cloud.landmarks[track.track_id]
    if len(lm_to_cloud) < 8:
        raise StageError("sfm", "too few identified landmarks for localization")
    known_ids = np.array(sorted(lm_to_cloud.keys()))
    known_pts = np.array([lm_to_cloud[i] for i in known_ids])
    rng = np.random.default_rng(seed + 4)
    out = []
    for i, pose in enumerate(gt_stream):
        ids, px = sim.project_landmarks(landmarks, pose, sim.DEFAULT_INTRINSICS)
        mask = np.isin(ids, known_ids)
        ids = ids[mask]
        px = px[mask] + rng.normal(0.0, scenario.sigma_px, size=(mask.sum(), 2))
        pts3d = np.array([lm_to_cloud[int(k)] for k in ids]) if len(ids) else np.zeros((0, 3))
        try:
            est = localize_query(pts3d, px, sim.DEFAULT_INTRINSICS,
                                 inlier_threshold=max(cfg.sfm.ex, 1.0),
                                 seed=seed + 5 + i)
        except Exception:
            # localization failure: fall back to the previous estimate
            est = out[-1].copy() if out else pose.copy()
        out.append(est)
    return out


def rpr_relative_stream(scenario: ScenarioConfig, cfg: ExperimentConfig,
                        gt_train: list, gt_test: list, seed: int,
                        out_dir: Path = None):
    """Train the flow regressor on simulated flow and predict test deltas."""
    geometry_box = sim.BoxGeometry(scenario.scene.box)
    K = sim.DEFAULT_INTRINSICS

    def pooled_flow(pa, pb):
        f = sim.synth_flow(geometry_box, pa, pb, K)
        return flow.mean_pool(f, POOL_K).as_stack()

    train_set = []
    for i in range(len(gt_train) - 1):
        train_set.append((pooled_flow(gt_train[i], gt_train[i + 1]),
                          rpr.make_rpr_target(gt_train[i], gt_train[i + 1])))
    net = rpr.make_rpr_network(units=cfg.rpr_units, seed=seed)
    tc = TrainConfig(learning_rate=cfg.train.learning_rate, batch_size=50,
                     iterations=cfg.rpr_iterations, seed=seed)
    net, trace = rpr.train_rpr(net, train_set, tc, cfg.rpr_weights)
    rels = []
    for i in range(len(gt_test) - 1):
        rel, _ = rpr.rpr_forward(net, pooled_flow(gt_test[i], gt_test[i + 1]))
        rels.append(rel)
    if out_dir is not None:
        rpr.save_rpr(out_dir / "rpr.ckpt", net)
    return rels, trace


# --- the pipeline -----------------------------------------------------------------


def run_pipeline(cfg: ExperimentConfig, out_dir=None, include_runtime=False) -> Report:
    """Execute the configured absolute x relative x fusion combination.

    Writes pose streams, checkpoints, and report.csv under out_dir (defaults
    to the configured output directory).  Returns the Report.
    """
    out_dir = Path(out_dir) if out_dir is not None else cfg.resolve(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenario = cfg.scenario
    report = Report()

    def stage(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, str(exc)) from exc
        return result, time.perf_counter() - t0

    # --- simulate
    def do_sim():
        gt_test, deg_test, rel_test, _ = simulate_split(
            scenario, scenario.seed + 500_000, scenario.test_duration)
        trains = []
        for k in range(scenario.train_trajectories):
            trains.append(simulate_split(scenario, scenario.seed + k,
                                         scenario.duration))
        return gt_test, deg_test, rel_test, trains

    (gt_test, deg_test, rel_test, trains), t_sim = stage("simulate", do_sim)
    save_pose_stream(out_dir / "gt.csv", gt_test)

    # --- absolute stream
    def do_abs():
        if cfg.absolute_source == "degraded":
            return deg_test
        if cfg.absolute_source == "sfm":
            return sfm_absolute_stream(scenario, cfg, gt_test,
                                       cfg.seed + 700_000)
        path = cfg.resolve(cfg.absolute_source.split(":", 1)[1])
        return geometry.load_pose_stream(path)

    abs_stream, t_abs = stage("absolute", do_abs)
    if len(abs_stream) != len(gt_test):
        raise StageError("absolute", "absolute stream length mismatch")
    save_pose_stream(out_dir / "abs.csv", abs_stream)

    # --- relative stream
    def do_rel():
        if cfg.relative_source == "exact":
            return rel_test, None
        if cfg.relative_source == "rpr":
            gt_train = trains[0][0]
            return rpr_relative_stream(scenario, cfg, gt_train, gt_test,
                                       cfg.seed + 800_000, out_dir)
        path = cfg.resolve(cfg.relative_source.split(":", 1)[1])
        return geometry.load_relative_stream(path), None

    (rel_stream, rpr_trace), t_rel = stage("relative", do_rel)
    if len(rel_stream) != len(gt_test) - 1:
        raise StageError("relative", "relative stream length mismatch")
    save_relative_stream(out_dir / "rel.csv", rel_stream)
    if rpr_trace is not None:
        _write_trace(out_dir / "rpr_loss.csv", rpr_trace)

    base_pos = median_position_error(abs_stream, gt_test)
    base_ori = median_orientation_error(abs_stream, gt_test)
    report.rows.append(ReportRow("absolute", base_pos, base_ori, 0.0,
                                 t_sim + t_abs + t_rel))

    # --- fusion: pose-graph optimization
    if cfg.fusion_method in ("pgo", "both"):
        def do_pgo():
            plan = pgo.plan_chunks(len(abs_stream), cfg.chunk_size, cfg.overlap)
            return pgo.refine_stream(abs_stream, rel_stream, cfg.pgo_weights, plan)

        refined, t_pgo = stage("pgo", do_pgo)
        save_pose_stream(out_dir / "refined_pgo.csv", refined)
        pos = median_position_error(refined, gt_test)
        ori = median_orientation_error(refined, gt_test)
        report.rows.append(ReportRow(
            "pgo", pos, ori, improvement_percent(base_pos, pos), t_pgo))

    # --- fusion: recurrent network
    if cfg.fusion_method in ("recurrent", "both"):
        def do_fusion():
            windows = []
            for gt_k, deg_k, rel_k, _ in trains:
                windows.extend(fusion.build_windows(
                    deg_k, rel_k, cfg.fusion.n_t, targets=gt_k))
            net, trace = fusion.train_fusion(cfg.fusion, windows, cfg.train)
            fused = fusion.predict_stream(net, abs_stream, rel_stream)
            return net, trace, fused

        (net, trace, fused), t_fus = stage("fusion", do_fusion)
        fusion.save_fusion(out_dir / "fusion.ckpt", net)
        _write_trace(out_dir / "fusion_loss.csv", trace)
        save_pose_stream(out_dir / "refined_fusion.csv", fused)
        pos = median_position_error(fused, gt_test)
        ori = median_orientation_error(fused, gt_test)
        name = f"fusion_{cfg.fusion.cell.value}"
        report.rows.append(ReportRow(
            name, pos, ori, improvement_percent(base_pos, pos), t_fus))

    write_report(out_dir / "report.csv", report, include_runtime=False)
    if include_runtime:
        write_report(out_dir / "timings.csv", report, include_runtime=True)
    return report


def _write_trace(path, trace) -> None:
    lines = ["iteration,loss"] + [f"{i},{float(v)!r}" for i, v in enumerate(trace)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# --- hyperparameter sweep over the reconstruction ----------------------------------

SWEEP_SFM_HEADER = ("sc,oc,mm,ex,gibbs,std,median_pos_m,median_ori_deg,"
                    "n_landmarks,failed")


def sweep_sfm(cfg: ExperimentConfig, grids: dict, out_path=None) -> list:
    """Cartesian-product reconstruction sweep on one synthetic scene.

    grids maps a subset of {sc, oc, mm, ex, gibbs, std} to value lists;
    omitted parameters stay at the configured value.  Per-combination
    failures are recorded as rows with failed=1.
    """
    from ..sfm import SfmConfig

    scenario = cfg.scenario
    seed = cfg.seed + 900_000
    landmarks = sim.generate_landmarks(scenario.scene, seed)
    rig = camera_rig(scenario.scene, n=10, seed=seed + 1)
    matchsets = sim.synth_matches_multi(
        landmarks, rig, sim.DEFAULT_INTRINSICS, scenario.sigma_px,
        scenario.match_outlier_rate, seed + 2,
    )
    queries = camera_rig(scenario.scene, n=6, seed=seed + 3)

    base = cfg.sfm
    axes = []
    for name, default in (("sc", base.sc), ("oc", base.oc), ("mm", base.mm),
                          ("ex", base.ex), ("gibbs", base.gibbs),
                          ("std", base.std)):
        axes.append([(name, v) for v in grids.get(name, [default])])
    combos = [[]]
    for axis in axes:
        combos = [c + [v] for c in combos for v in axis]

    rows = []
    for combo in combos:
        kv = dict(combo)
        try:
            sfm_cfg = SfmConfig(sc=float(kv["sc"]), oc=float(kv["oc"]),
                                mm=int(kv["mm"]), ex=float(kv["ex"]),
                                gibbs=bool(kv["gibbs"]), std=float(kv["std"]))
            cloud, tracks, _ = reconstruct(matchsets, sim.DEFAULT_INTRINSICS,
                                           sfm_cfg, seed=seed + 4)
            cloud = align_cloud_to_world(cloud, dict(enumerate(rig)))
            pts = np.array(list(cloud.landmarks.values()))
            rng = np.random.default_rng(seed + 5)
            errs_p, errs_o = [], []
            for qi, qpose in enumerate(queries):
                ids, px = sim.project_landmarks(pts, qpose, sim.DEFAULT_INTRINSICS)
                if len(ids) < 6:
                    continue
                px = px + rng.normal(0.0, scenario.sigma_px, size=px.shape)
                est = localize_query(pts[ids], px, sim.DEFAULT_INTRINSICS,
                                     inlier_threshold=max(sfm_cfg.ex, 1.0),
                                     seed=seed + 6 + qi)
                errs_p.append(float(np.linalg.norm(est.p - qpose.p)))
                errs_o.append(geometry.quat_angle_deg(est.q, qpose.q))
            if not errs_p:
                raise StageError("sweep-sfm", "no query could be localized")
            rows.append({**kv, "median_pos_m": float(np.median(errs_p)),
                         "median_ori_deg": float(np.median(errs_o)),
                         "n_landmarks": len(cloud.landmarks), "failed": 0})
        except Exception as exc:
            rows.append({**kv, "median_pos_m": float("inf"),
                         "median_ori_deg": float("inf"), "n_landmarks": 0,
                         "failed": 1, "error": str(exc)})
    if out_path is not None:
        lines = [SWEEP_SFM_HEADER]
        for r in rows:
            lines.append(
                f"{float(r['sc'])!r},{float(r['oc'])!r},{int(r['mm'])},"
                f"{float(r['ex'])!r},{int(r['gibbs'])},{float(r['std'])!r},"
                f"{float(r['median_pos_m'])!r},{float(r['median_ori_deg'])!r},"
                f"{r['n_landmarks']},{r['failed']}"
            )
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    return rows
