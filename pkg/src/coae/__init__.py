"""One-shot object detection via query-target co-attention and channel
co-excitation, trained and evaluated on a procedural synthetic benchmark."""

__version__ = "0.1.0"
