"""Greyscale input experiments: resampling, channel composition, a small autodiff
engine with the layers and losses needed to train on them, and a synthetic
descriptor dataset to train on."""

from . import compose, descriptors, errors, experiment, layers, losses, metrics, optim, pgm, resample, synth, tensor

__version__ = "0.1.0"

__all__ = ["compose", "descriptors", "errors", "experiment", "layers", "losses", "metrics", "optim", "pgm",
           "resample", "synth", "tensor"]
