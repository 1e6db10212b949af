"""Instance-aware depth completion built on a minimal reverse-mode autodiff core.

The package is organized in layers:

- ``tensor``: numpy-backed tensors with a gradient tape (the only autodiff
  machinery in the project).
- ``netpbm``, ``data``, ``masks``: binary PPM/PGM codecs, the procedural
  scene generator, and instance-mask merging.
- ``unet``, ``attention``, ``head``, ``model``: the network itself.
- ``losses``, ``optim``, ``metrics``, ``trainer``: the training harness.
- ``workflows``, ``service``, ``cli``: end-user entry points.  The CLI is a
  thin client of the HTTP service and talks to an in-process app by default.
"""

__version__ = "0.1.0"
