"""Spectral unsupervised domain adaptation at desk scale.

Subpackage map:

- ``autodiff``: tape-based reverse-mode differentiation over float64 arrays
- ``spectral``: centered 2-D DFT, radial band masks, decompose/recompose
- ``transformer``: attention-gated spectrum transformer
- ``models``: classifier and domain discriminator MLPs
- ``losses``: supervised, adversarial, discrepancy and similarity objectives
- ``data``: synthetic two-domain benchmark and its binary file format
- ``metrics``: MMD, Frechet feature distances, gate reports
- ``train``: alternating adversarial trainer with ablation tiers
- ``config`` / ``checkpoint`` / ``cli``: run configuration, binary
  checkpoints, command-line entry points
"""

__version__ = "0.1.0"
