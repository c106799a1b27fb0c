"""Few-shot braking-intent decoding with a convolutional spiking network."""

__version__ = "0.1.0"
