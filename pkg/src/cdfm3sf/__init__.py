"""Multi-scale, multi-resolution cloud detection for Sentinel-2 style band stacks.

A from-scratch numpy implementation: a reverse-mode tape (``tensor``),
network layers (``layers``), the three-branch model with parameter audit
and checkpoints (``model``), losses and Adam training (``training``), the
raster/patch pipeline with synthetic scenes (``data``), scoring
(``metrics``) and a command-line front end (``cli``).
"""

__version__ = "0.1.0"
