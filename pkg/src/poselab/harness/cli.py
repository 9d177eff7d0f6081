"""Command-line interface.

Subcommands: simulate, sfm, train-rpr, train-fusion, pgo, eval, sweep-sfm,
sweep-fusion.  Exit codes: 0 success, 1 usage/config error, 2 stage failure.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from .. import flow, fusion, geometry, pgo, rpr, sim
from ..cells import CellKind, TrainConfig
from ..errors import StageError
from ..sfm import load_matches_csv, reconstruct, save_matches_csv, save_point_cloud
from .config import ExperimentConfig, load_config
from .pipeline import (
    POOL_K,
    camera_rig,
    run_pipeline,
    simulate_split,
    sweep_sfm,
    _write_trace,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.scenario.seed = args.seed
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
        cfg.base_dir = Path.cwd()
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(cfg: ExperimentConfig) -> None:
    out = _out_dir(cfg)
    scenario = cfg.scenario
    gt, degraded, rel, flags = simulate_split(scenario, scenario.seed,
                                              scenario.duration)
    geometry.save_pose_stream(out / "gt.csv", gt)
    geometry.save_pose_stream(out / "abs.csv", degraded)
    geometry.save_relative_stream(out / "rel.csv", rel)
    if scenario.emit_flows:
        flow_dir = out / "flows"
        flow_dir.mkdir(exist_ok=True)
        box = sim.BoxGeometry(scenario.scene.box)
        manifest = []
        for i in range(len(gt) - 1):
            f = sim.synth_flow(box, gt[i], gt[i + 1], sim.DEFAULT_INTRINSICS)
            pooled = flow.mean_pool(f, POOL_K)
            name = f"flows/{i:06d}.flo"
            flow.save_flow(out / name, pooled)
            manifest.append((name, rpr.make_rpr_target(gt[i], gt[i + 1])))
        rpr.save_manifest(out / "manifest.csv", manifest)
    if scenario.emit_matches:
        landmarks = sim.generate_landmarks(scenario.scene, scenario.seed + 11)
        rig = camera_rig(scenario.scene, n=10, seed=scenario.seed + 12)
        matchsets = sim.synth_matches_multi(
            landmarks, rig, sim.DEFAULT_INTRINSICS, scenario.sigma_px,
            scenario.match_outlier_rate, scenario.seed + 13,
        )
        save_matches_csv(out / "matches.csv", matchsets)
        geometry.save_pose_stream(out / "rig_gt.csv", rig)
    print(f"simulate: wrote {len(gt)} poses to {out}")


def cmd_sfm(cfg: ExperimentConfig) -> None:
    out = _out_dir(cfg)
    matches_path = out / "matches.csv"
    if not matches_path.exists():
        raise StageError("sfm", f"matches file not found: {matches_path} "
                                "(run `simulate` with emit_matches = true)")
    matchsets = load_matches_csv(matches_path)
    cloud, tracks, info = reconstruct(matchsets, sim.DEFAULT_INTRINSICS,
                                      cfg.sfm, seed=cfg.seed)
    save_point_cloud(out / "cloud.csv", cloud)
    cams = [cloud.cameras[k] for k in sorted(cloud.cameras.keys())]
    geometry.save_pose_stream(out / "abs_sfm.csv", cams)
    print(f"sfm: {len(cloud.cameras)} cameras, {len(cloud.landmarks)} landmarks, "
          f"final rms {info['final_rms']:.4f} px")


def cmd_train_rpr(cfg: ExperimentConfig) -> None:
    out = _out_dir(cfg)
    manifest_path = out / "manifest.csv"
    if not manifest_path.exists():
        raise StageError("train-rpr", f"manifest not found: {manifest_path} "
                                      "(run `simulate` with emit_flows = true)")
    rows = rpr.load_manifest(manifest_path)
    dataset = []
    for fname, target in rows:
        f = flow.load_flow(out / fname)
        dataset.append((f.as_stack(), target))
    net = rpr.make_rpr_network(units=cfg.rpr_units, seed=cfg.train.seed)
    tc = TrainConfig(learning_rate=cfg.train.learning_rate, batch_size=50,
                     iterations=cfg.rpr_iterations, seed=cfg.train.seed)
    net, trace = rpr.train_rpr(net, dataset, tc, cfg.rpr_weights)
    rpr.save_rpr(out / "rpr.ckpt", net)
    _write_trace(out / "rpr_loss.csv", trace)
    print(f"train-rpr: {len(dataset)} samples, final loss {trace[-1]:.6f}")


def cmd_train_fusion(cfg: ExperimentConfig) -> None:
    out = _out_dir(cfg)
    scenario = cfg.scenario
    windows = []
    for k in range(scenario.train_trajectories):
        gt, degraded, rel, _ = simulate_split(scenario, scenario.seed + k,
                                              scenario.duration)
        windows.extend(fusion.build_windows(degraded, rel, cfg.fusion.n_t,
                                            targets=gt))
    net, trace = fusion.train_fusion(cfg.fusion, windows, cfg.train)
    fusion.save_fusion(out / "fusion.ckpt", net)
    _write_trace(out / "fusion_loss.csv", trace)
    print(f"train-fusion: {len(windows)} windows, final loss {trace[-1]:.6f}")


def cmd_pgo(cfg: ExperimentConfig) -> None:
    out = _out_dir(cfg)
    abs_path = out / "abs.csv"
    rel_path = out / "rel.csv"
    if not abs_path.exists() or not rel_path.exists():
        raise StageError("pgo", f"need {abs_path} and {rel_path} (run `simulate`)")
    abs_stream = geometry.load_pose_stream(abs_path)
    rel_stream = geometry.load_relative_stream(rel_path)
    plan = pgo.plan_chunks(len(abs_stream), cfg.chunk_size, cfg.overlap)
    refined = pgo.refine_stream(abs_stream, rel_stream, cfg.pgo_weights, plan)
    geometry.save_pose_stream(out / "refined_pgo.csv", refined)
    print(f"pgo: refined {len(refined)} poses over {len(plan.ranges)} chunks")


def cmd_eval(cfg: ExperimentConfig, timings: bool) -> None:
    report = run_pipeline(cfg, include_runtime=timings)
    out = cfg.resolve(cfg.output_dir)
    print(f"eval: report written to {out / 'report.csv'}")
    for row in report.rows:
        print(f"  {row.method}: {row.median_pos_m:.4f} m / "
              f"{row.median_ori_deg:.3f} deg / {row.improvement_pct:+.1f} %")


def cmd_sweep_sfm(cfg: ExperimentConfig) -> None:
    out = _out_dir(cfg)
    grids = cfg.sweeps.get("sfm", {})
    rows = sweep_sfm(cfg, grids, out_path=out / "sweep_sfm.csv")
    n_fail = sum(r["failed"] for r in rows)
    print(f"sweep-sfm: {len(rows)} combinations, {n_fail} failed -> "
          f"{out / 'sweep_sfm.csv'}")


def cmd_sweep_fusion(cfg: ExperimentConfig) -> None:
    out = _out_dir(cfg)
    scenario = cfg.scenario
    sweep_cfg = cfg.sweeps.get("fusion", {})
    kinds = [CellKind(c) for c in sweep_cfg.get("cells", ["trnn", "lstm"])]
    n_ts = [int(v) for v in sweep_cfg.get("n_t", [10, 15])]
    r_us = [int(v) for v in sweep_cfg.get("r_u", [cfg.fusion.r_u])]
    stacking = [bool(v) for v in sweep_cfg.get("stacked", [True])]
    control = sweep_cfg.get("control_iterations")

    trains = [simulate_split(scenario, scenario.seed + k, scenario.duration)
              for k in range(scenario.train_trajectories)]
    gt_test, deg_test, rel_test, _ = simulate_split(
        scenario, scenario.seed + 500_000, scenario.test_duration)

    window_cache = {}

    def train_windows(n_t):
        if n_t not in window_cache:
            wins = []
            for gt, degraded, rel, _ in trains:
                wins.extend(fusion.build_windows(degraded, rel, n_t, targets=gt))
            window_cache[n_t] = wins
        return window_cache[n_t]

    def evaluate(net):
        fused = fusion.predict_stream(net, deg_test, rel_test)
        return (geometry.median_position_error(fused, gt_test),
                geometry.median_orientation_error(fused, gt_test))

    grid = fusion.default_sweep_grid(kinds, stacking, n_ts, r_us)
    if control is not None:
        grid += [(kinds[0], stacking[0], n_ts[0], r_us[0], int(control))]
    rows = fusion.sweep_fusion(grid, train_windows, evaluate, cfg.train)
    fusion.save_sweep_csv(out / "sweep_fusion.csv", rows)
    print(f"sweep-fusion: {len(rows)} configurations -> {out / 'sweep_fusion.csv'}")


def main(argv=None) -> int:
    parser = _Parser(prog="poselab",
                     description="desk-scale visual localization toolkit")
    parser.add_argument("--config", required=True, help="experiment TOML file")
    parser.add_argument("--seed", type=int, default=None, help="override seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--timings", action="store_true",
                        help="also write timings.csv (non-deterministic)")
    parser.add_argument("command", choices=[
        "simulate", "sfm", "train-rpr", "train-fusion", "pgo", "eval",
        "sweep-sfm", "sweep-fusion",
    ])
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 1
    cfg = _apply_overrides(cfg, args)
    commands = {
        "simulate": lambda: cmd_simulate(cfg),
        "sfm": lambda: cmd_sfm(cfg),
        "train-rpr": lambda: cmd_train_rpr(cfg),
        "train-fusion": lambda: cmd_train_fusion(cfg),
        "pgo": lambda: cmd_pgo(cfg),
        "eval": lambda: cmd_eval(cfg, args.timings),
        "sweep-sfm": lambda: cmd_sweep_sfm(cfg),
        "sweep-fusion": lambda: cmd_sweep_fusion(cfg),
    }
    try:
        commands[args.command]()
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any stage crash maps to exit code 2
        print(f"error: stage failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
