"""poselab: desk-scale visual self-localization toolkit.

Submodules:
  geometry  pose algebra, metrics, pose-stream CSV
  flow      dense Lucas-Kanade optical flow + pooling
  cells     recurrent cell zoo with exact BPTT, Adam, copy-memory task
  rpr       relative pose regressor on pooled flow
  sfm       miniature structure-from-motion pipeline
  pgo       chunked pose-graph optimization
  fusion    recurrent absolute/relative pose fusion
  sim       procedural scene/trajectory/measurement generator
  harness   configuration, pipeline orchestration, CLI
"""

from ._backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
