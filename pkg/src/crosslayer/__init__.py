"""Cross-layer WMMSE resource allocation for heterogeneous wireless networks.

Layers and their solvers:
  wmmse       sum-utility precoding in interference / broadcast channels
  scheduler   joint beamforming and slot scheduling
  assignment  joint BS association and beamforming
  clustering  sparse (group-LASSO) precoding for CoMP clustering
  backhaul    joint multicommodity routing and SISO precoding (min-rate max)
  stochastic  expected-rate precoding under partial CSI
  net_model   topologies, channels, uncertainty models
  harness     experiment orchestration, baselines, oracles, CLI backend
"""

from ._kernels import backend_name

__version__ = "0.1.0"
__all__ = ["backend_name", "__version__"]
