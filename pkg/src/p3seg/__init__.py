"""Semi-supervised 2D segmentation with a periodic, progressively growing CutMix
schedule and a loss that up-weights hard pixels along the paste boundary."""

__version__ = "0.1.0"
