"""fiqlab: a desk-scale testbed for variance-guided face-image-quality
training and error-versus-rejection evaluation on synthetic identity
datasets."""

__version__ = "0.1.0"
