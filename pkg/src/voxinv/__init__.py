"""Model-inversion attacks on sparse voxel point-cloud feature extractors."""

__version__ = "0.1.0"
