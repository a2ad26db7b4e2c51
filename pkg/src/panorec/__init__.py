"""panorec: single panoramic X-ray to 3D attenuation volume, desk scale.

Synthetic jaw phantoms, a Beer-Lambert projector, focal-trough geometry
with an invertible flatten/scatter pair, and a two-stage lift/refine
network whose gradients are hand-written per op and verified against
central finite differences.
"""

__version__ = "0.1.0"

from .estimator import PanoramicReconstructor  # noqa: E402,F401
