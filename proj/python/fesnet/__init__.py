"""FES-Net retinal vessel segmentation."""

from ._core import (
    FesnetError,
    Model,
    compute_metrics,
    confusion_counts,
    conv2d,
    cross_entropy,
    dataset_splits,
    gradcheck_suite,
    lr_schedule,
    render_overlay,
    scaled_shape,
    softmax_channels,
    synthetic_sample,
    transposed_conv2d,
    write_synthetic_dataset,
)

__all__ = [
    "FesnetError",
    "Model",
    "compute_metrics",
    "confusion_counts",
    "conv2d",
    "cross_entropy",
    "dataset_splits",
    "gradcheck_suite",
    "lr_schedule",
    "render_overlay",
    "scaled_shape",
    "softmax_channels",
    "synthetic_sample",
    "transposed_conv2d",
    "write_synthetic_dataset",
]
