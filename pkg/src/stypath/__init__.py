"""Style-transfer data augmentation and MC-dropout evaluation for histology image classifiers."""

__version__ = "0.1.0"
