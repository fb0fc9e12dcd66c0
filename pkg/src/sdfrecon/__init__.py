"""sdfrecon: sparse-view 3D reconstruction by differentiable SDF rendering."""

__version__ = "0.1.0"
