"""Location-aware patch-based 3D segmentation on a small numpy autodiff core.

Subpackage map:

- ``tensor`` / ``ops`` / ``optim`` / ``gradcheck``: dense tensors with
  reverse-mode autodiff and exactly the operations the models need.
- ``location``: volumes, patch sampling, axial score mapping, coordinate
  channels.
- ``data``: synthetic location-dependent volume generation and the RV01
  on-disk format.
- ``model``: 3D U-Net with three location-integration modes (none,
  coordconv, locbam) plus checkpoint I/O.
- ``training``: seeded SGD training loop with CSV-able logs.
- ``postprocess``: largest-component filtering and atlas masking.
- ``eval`` / ``experiments``: Dice metrics, sliding-window inference,
  shift-robustness and coverage sweeps.
- ``cli``: ``locseg`` command-line entry point.
"""

__version__ = "0.1.0"
