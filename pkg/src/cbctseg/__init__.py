"""Two-phase CBCT dental segmentation toolkit.

Label-map post-processing around an external segmentation network: volume
I/O, resampling, label remapping, STAPLE fusion, cleanup, the mandible-anchored
crop for the nerve pass, Dice reporting and a synthetic phantom.
"""

__version__ = "0.1.0"

from .grid import CANONICAL, ImageGrid, LabelGrid, Orientation, VoxelBox  # noqa: E402

__all__ = ["__version__", "CANONICAL", "ImageGrid", "LabelGrid", "Orientation", "VoxelBox"]
