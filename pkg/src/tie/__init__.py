"""(n+1)-class training with inversion-driven exclusion into a garbage class, and OOD scoring."""

__version__ = "0.1.0"
