"""Inverse rendering under rotated environment lighting.

Per-Gaussian albedo and roughness plus an environment map are recovered from
multi-view images, each tagged with the rotation of the illumination. A proxy
mesh answers incident-ray queries and per-rotation neural radiance caches
supply indirect light.
"""

__version__ = "0.1.0"
