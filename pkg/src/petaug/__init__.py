"""Data augmentation under parameter-efficient tuning on a desk-scale encoder."""
__version__ = "0.1.0"
