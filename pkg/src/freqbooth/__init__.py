"""freqbooth: toy-scale dual-branch latent diffusion with identity injection
and DCT band-filtered conditioning, built for deterministic desk-scale
verification (no GPU, no pretrained weights)."""

__version__ = "0.1.0"
