"""Occluded person re-identification with an attention disturbance mask and dual-path training."""

__version__ = "0.1.0"
