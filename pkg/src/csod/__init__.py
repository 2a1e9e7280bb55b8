"""Compressed salient-object detection toolkit: a float64 tensor engine,
fire/SE decoder blocks, a miniature U-shape network, Adam/AdaX optimizers,
saliency metrics and a synthetic data pipeline."""

__version__ = "0.1.0"
