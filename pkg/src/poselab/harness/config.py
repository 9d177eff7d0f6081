"""Experiment configuration: one TOML file with named sections.

Hyperparameter symbols keep their short names (sc, oc, mm, ex, gibbs, std,
n_t, r_u, beta1, beta2, beta3) so a config reads like the tables they come
from.  Relative paths resolve against the config file's directory.
"""

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..cells import CellKind, TrainConfig
from ..fusion import FusionConfig
from ..pgo import PgoWeights
from ..rpr import RprLossWeights
from ..sfm import SfmConfig
from ..sim import HANDHELD_PROFILE, ROBOT_PROFILE, MotionProfile, SceneSpec

PAPER_RPR_ITERATIONS = 150_000
PAPER_FUSION_ITERATIONS = 75_000
DESK_ITERATIONS = 5_000


@dataclass
class ScenarioConfig:
    profile: MotionProfile
    duration: float = 60.0
    test_duration: float = 45.0
    rate: float = 23.0
    seed: int = 7
    scene: SceneSpec = field(default_factory=SceneSpec)
    train_trajectories: int = 4
    emit_flows: bool = False
    emit_matches: bool = False
    sigma_p: float = 0.2
    sigma_q: float = 1.0
    outlier_rate: float = 0.05
    outlier_mag: float = 1.0
    sigma_px: float = 0.5
    match_outlier_rate: float = 0.0


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig
    sfm: SfmConfig
    fusion: FusionConfig
    train: TrainConfig
    pgo_weights: PgoWeights
    chunk_size: int = 100
    overlap: int = 20
    rpr_weights: RprLossWeights = field(default_factory=RprLossWeights)
    rpr_units: int = 50
    beta1: float = 50.0
    absolute_source: str = "degraded"
    relative_source: str = "exact"
    fusion_method: str = "both"
    output_dir: str = "out"
    seed: int = 7
    base_dir: Path = field(default_factory=Path.cwd)
    rpr_iterations: int = DESK_ITERATIONS
    sweeps: dict = field(default_factory=dict)

    def resolve(self, path_str: str) -> Path:
        p = Path(path_str)
        return p if p.is_absolute() else self.base_dir / p


_PROFILES = {"robot": ROBOT_PROFILE, "handheld": HANDHELD_PROFILE}


def _profile_from(section: dict) -> MotionProfile:
    name = section.get("profile", "robot")
    base = _PROFILES.get(name)
    if base is None:
        raise ValueError(f"unknown motion profile {name!r}")
    fields = {}
    for key in ("speed_min", "speed_max", "yaw_rate_max_deg", "pos_jitter",
                "rot_jitter_deg"):
        if key in section:
            fields[key] = float(section[key])
    if not fields:
        return base
    merged = {
        "kind": base.kind,
        "speed_min": base.speed_min, "speed_max": base.speed_max,
        "yaw_rate_max_deg": base.yaw_rate_max_deg,
        "pos_jitter": base.pos_jitter, "rot_jitter_deg": base.rot_jitter_deg,
    }
    merged.update(fields)
    return MotionProfile(**merged)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)

    scn = raw.get("scenario", {})
    noise = raw.get("noise", {})
    scene_kwargs = {}
    if "box" in scn:
        scene_kwargs["box"] = tuple(float(v) for v in scn["box"])
    if "landmarks" in scn:
        scene_kwargs["landmark_count"] = int(scn["landmarks"])
    if "hole_fraction" in scn:
        scene_kwargs["hole_fraction"] = float(scn["hole_fraction"])
    scenario = ScenarioConfig(
        profile=_profile_from(scn),
        duration=float(scn.get("duration", 60.0)),
        test_duration=float(scn.get("test_duration", 45.0)),
        rate=float(scn.get("rate", 23.0)),
        seed=int(scn.get("seed", raw.get("seed", 7))),
        scene=SceneSpec(**scene_kwargs),
        train_trajectories=int(scn.get("train_trajectories", 4)),
        emit_flows=bool(scn.get("emit_flows", False)),
        emit_matches=bool(scn.get("emit_matches", False)),
        sigma_p=float(noise.get("sigma_p", 0.2)),
        sigma_q=float(noise.get("sigma_q", 1.0)),
        outlier_rate=float(noise.get("outlier_rate", 0.05)),
        outlier_mag=float(noise.get("outlier_mag", 1.0)),
        sigma_px=float(noise.get("sigma_px", 0.5)),
        match_outlier_rate=float(noise.get("match_outlier_rate", 0.0)),
    )

    s = raw.get("sfm", {})
    sfm_cfg = SfmConfig(
        sc=float(s.get("sc", 0.0)), oc=float(s.get("oc", 0.0)),
        mm=int(s.get("mm", 3)), ex=float(s.get("ex", 2.0)),
        gibbs=bool(s.get("gibbs", False)), std=float(s.get("std", 3.0)),
    )

    f = raw.get("fusion", {})
    fusion_cfg = FusionConfig(
        cell=CellKind(f.get("cell", "trnn")), n_t=int(f.get("n_t", 15)),
        r_u=int(f.get("r_u", 10)), stacked=bool(f.get("stacked", True)),
        beta3=float(f.get("beta3", 50.0)),
        batch_size=int(f.get("batch_size", 100)),
    )

    t = raw.get("train", {})
    paper_scale = bool(t.get("paper_scale", False))
    iterations = int(t.get("iterations",
                           PAPER_FUSION_ITERATIONS if paper_scale else DESK_ITERATIONS))
    train_cfg = TrainConfig(
        learning_rate=float(t.get("learning_rate", 1e-3)),
        batch_size=int(t.get("batch_size", fusion_cfg.batch_size)),
        iterations=iterations,
        seed=int(t.get("seed", raw.get("seed", 7))),
    )
    rpr_iterations = int(t.get("rpr_iterations",
                               PAPER_RPR_ITERATIONS if paper_scale else DESK_ITERATIONS))

    g = raw.get("pgo", {})
    pgo_weights = PgoWeights(
        w_abs_p=float(g.get("w_abs_p", 1.0)), w_abs_q=float(g.get("w_abs_q", 1.0)),
        w_rel_p=float(g.get("w_rel_p", 10.0)), w_rel_q=float(g.get("w_rel_q", 10.0)),
    )

    p = raw.get("pipeline", {})
    out = raw.get("output", {})
    r = raw.get("rpr", {})
    cfg = ExperimentConfig(
        scenario=scenario,
        sfm=sfm_cfg,
        fusion=fusion_cfg,
        train=train_cfg,
        pgo_weights=pgo_weights,
        chunk_size=int(g.get("chunk_size", 100)),
        overlap=int(g.get("overlap", 20)),
        rpr_weights=RprLossWeights(beta2=float(r.get("beta2", 50.0))),
        rpr_units=int(r.get("units", 50)),
        beta1=float(f.get("beta1", 50.0)),
        absolute_source=str(p.get("absolute", "degraded")),
        relative_source=str(p.get("relative", "exact")),
        fusion_method=str(p.get("fusion", "both")),
        output_dir=str(out.get("dir", "out")),
        seed=int(raw.get("seed", 7)),
        base_dir=path.parent.resolve(),
        rpr_iterations=rpr_iterations,
        sweeps=raw.get("sweeps", {}),
    )
    if cfg.absolute_source not in ("degraded", "sfm") and not cfg.absolute_source.startswith("file:"):
        raise ValueError(f"unknown absolute source {cfg.absolute_source!r}")
    if cfg.relative_source not in ("exact", "rpr") and not cfg.relative_source.startswith("file:"):
        raise ValueError(f"unknown relative source {cfg.relative_source!r}")
    if cfg.fusion_method not in ("pgo", "recurrent", "both", "none"):
        raise ValueError(f"unknown fusion method {cfg.fusion_method!r}")
    return cfg
