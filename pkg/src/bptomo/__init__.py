"""Binary tomography by belief propagation, with a total-variation baseline."""

__version__ = "0.1.0"

from .geometry import RaySet, Ray, Sinogram, build_ray_set, project, add_noise  # noqa: E402
from .phantom import PhantomSpec, generate_phantom, boundary_density  # noqa: E402
from .bp import BpConfig, ReconReport, reconstruct  # noqa: E402
from .tv import TvConfig, gfb_reconstruct, segment_continuous, optimize_beta  # noqa: E402

__all__ = [
    "RaySet", "Ray", "Sinogram", "build_ray_set", "project", "add_noise",
    "PhantomSpec", "generate_phantom", "boundary_density",
    "BpConfig", "ReconReport", "reconstruct",
    "TvConfig", "gfb_reconstruct", "segment_continuous", "optimize_beta",
]
