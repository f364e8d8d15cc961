"""Volume-prior semi-supervised segmentation at desk scale.

Core pieces: the volume-constrained entropic softmax with threshold-dynamics
regularization (:mod:`vpseg.vpstd`), exact and critic-based W1 losses
(:mod:`vpseg.wasserstein`), toy networks with a small reverse-mode engine
(:mod:`vpseg.nets`, :mod:`vpseg.autodiff`), the alternating trainer
(:mod:`vpseg.trainer`) and segmentation metrics (:mod:`vpseg.metrics`).
"""

__version__ = "0.1.0"
