"""Miniature structure-from-motion pipeline.

Match filtering, track building, staged sparse bundle adjustment, query
localization, and the full reconstruction driver.
"""

from .tracks import (
    FeatureTrack,
    PointCloud,
    SfmConfig,
    build_tracks,
    cluster_separation,
    load_matches_csv,
    load_point_cloud,
    make_floor_grid,
    overlap_criterion,
    save_matches_csv,
    save_point_cloud,
    spatial_consistency_filter,
)
from .ba import bundle_adjust, project_point, reprojection_residuals, triangulate
from .pnp import localize_query, solve_p3p
from .pipeline import gibbs_exclude, reconstruct

__all__ = [
    "FeatureTrack", "PointCloud", "SfmConfig",
    "build_tracks", "cluster_separation", "spatial_consistency_filter",
    "overlap_criterion", "make_floor_grid",
    "save_matches_csv", "load_matches_csv", "save_point_cloud", "load_point_cloud",
    "bundle_adjust", "triangulate", "project_point", "reprojection_residuals",
    "localize_query", "solve_p3p",
    "reconstruct", "gibbs_exclude",
]
