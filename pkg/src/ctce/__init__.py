"""Synthetic vehicle-infrastructure cooperative 3D detection with temporal query fusion."""

__version__ = "0.1.0"
