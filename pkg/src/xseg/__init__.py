"""2.5D segmentation toolkit: a cross-slice attention U-Net with
hand-derived backprop, a combined Dice/boundary loss, segmentation
metrics (DSC, IoU, HD95), a phantom-volume data pipeline, and a
training/evaluation/ablation harness behind one CLI."""

__version__ = "0.1.0"

from .network import CrossSliceUNet, NetworkConfig

__all__ = ["CrossSliceUNet", "NetworkConfig", "__version__"]
