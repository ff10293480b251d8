"""Axial fusion transformer U-Net on numpy: a CNN codec around inter- and intra-slice attention."""
__version__ = "0.1.0"
