"""Object-conditioned hand grasp generation: latent diffusion over a hand autoencoder
with a physics-aware residual refiner."""

__version__ = "0.1.0"
