"""Part-aware sparse-voxel generation: box planning, flow-based part synthesis, evaluation."""

__version__ = "0.1.0"
