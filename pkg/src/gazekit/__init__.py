"""Synthetic eye data, eye-region segmentation, contrastive pretraining and
multistream gaze regression."""

__version__ = "0.1.0"
