"""Ground-truth renderer and synthetic dataset generator.

Everything here is implemented independently of the reconstruction modules
(own intersection, BRDF and environment-lookup code) so that cross-checks
between the two are meaningful.
"""

from .scenes import SCENES, SceneDescription, make_scene
from .tracer import gbuffer, path_trace, ao_reference
from .gen import gen_dataset

__all__ = ["SCENES", "SceneDescription", "make_scene", "gbuffer", "path_trace", "ao_reference", "gen_dataset"]
