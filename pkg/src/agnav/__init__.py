"""Energy-aware navigation for aerial-ground robots.

Subpackages cover the voxel world model (`voxel_map`), uniform B-spline
trajectories (`bspline`), the kinodynamic lattice search front-end
(`hybrid_astar`), gradient-based trajectory optimization (`traj_opt`), the
end-to-end planner (`planner`), and the simulation benchmark (`simbench`).
"""

from . import errors

__all__ = ["errors"]
__version__ = "0.1.0"
