"""Cross-sensor message propagation and set-based 3D detection at desk scale."""

__version__ = "0.1.0"
