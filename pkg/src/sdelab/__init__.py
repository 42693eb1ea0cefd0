"""Score-based generative modeling with SDEs at desk scale."""

__version__ = "0.1.0"
