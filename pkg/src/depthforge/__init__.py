"""depthforge: dual-branch latent-diffusion depth inpainting at desk scale."""

__version__ = "0.1.0"
