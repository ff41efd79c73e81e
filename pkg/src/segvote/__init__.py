"""Semi-supervised segmentation with voted multi-head pseudo labels and cross-model supervision."""
__version__ = "0.1.0"
