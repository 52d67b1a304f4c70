"""Deformable 3D Gaussian avatars with tri-plane features fetched through learnable quaternion derivations."""

__version__ = "0.1.0"
