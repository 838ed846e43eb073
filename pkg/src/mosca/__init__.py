"""Motion-scaffold 4D reconstruction core: cameras, scaffolds and fused Gaussians."""

__version__ = "0.1.0"
