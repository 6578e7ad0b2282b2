"""Hand-aware depth restoration for transparent objects with a ray-voxel implicit model."""

__version__ = "0.1.0"
