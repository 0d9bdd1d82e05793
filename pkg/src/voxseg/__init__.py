"""voxseg: 3D volumetric segmentation on a self-contained autodiff engine."""

__version__ = "0.1.0"
