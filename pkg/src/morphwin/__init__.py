"""morphwin: deformable 3D registration with windowed attention on a small autodiff core."""

__version__ = "0.1.0"
