"""avagen: generative articulated implicit avatars at desk scale."""

__version__ = "0.1.0"
