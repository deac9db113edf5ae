"""BC-CT: background-contrast saliency masks supervising class activation maps."""

__version__ = "0.1.0"
