"""Panoptic pseudo labels from stereo video, and unsupervised panoptic evaluation."""

__version__ = "0.1.0"
