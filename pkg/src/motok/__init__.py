"""motok: discrete motion tokenization with temporal alignment, plus masked
text-conditioned token generation, at desk scale."""

__version__ = "0.1.0"
