"""Single-stream action recognition with a self-supervised motion-segmentation
side task, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
