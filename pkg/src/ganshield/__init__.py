"""GAN-based detection and purification of adversarial inputs."""

__version__ = "0.1.0"
