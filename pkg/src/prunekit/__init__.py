"""Model compression toolkit: train a small MNIST CNN, then shrink it by
ranking units on normalized L1 weight norms and masking the weakest ones
globally, with iterative retraining to hold accuracy."""

__version__ = "0.1.0"
