"""
Procedural shapes, signed distances and marching cubes
======================================================

Builds a few analytic shapes, meshes their distance fields and measures how
far the meshes sit from the true surfaces.
"""

import numpy as np

from latent_sdf.geometry import (box, chamfer_distance, grid_points, marching_cubes,
                                 mesh_sample_points, sample_surface, sdf_eval, sphere,
                                 subtraction, torus, union)

rng = np.random.default_rng(0)

# %%
# A shape is a small tree of primitives joined by CSG operations.
ring = torus([0.0, 0.0, 0.0], 0.55, 0.15)
cube = box([0.0, 0.0, 0.0], [0.35, 0.35, 0.35])
shapes = {
    "sphere": sphere([0.1, 0.0, -0.1], 0.6),
    "torus": ring,
    "box minus sphere": subtraction(cube, sphere([0.0, 0.0, 0.35], 0.25)),
    "torus plus box": union(ring, box([0.0, 0.0, 0.0], [0.12, 0.12, 0.5])),
}

# %%
# Distances are negative inside.  The origin lies inside the box but in the hole
# of the torus.
for name, spec in shapes.items():
    print(f"{name:>18s}: sdf(origin) = {sdf_eval(spec, np.zeros(3)):+.3f}")

# %%
# Mesh each field on a 64^3 lattice and compare with exact surface samples.
res = 64
lattice = grid_points(res)
for name, spec in shapes.items():
    mesh = marching_cubes(sdf_eval(spec, lattice).reshape(res, res, res))
    cd = chamfer_distance(mesh_sample_points(mesh, 2048, rng), sample_surface(spec, 2048, rng))
    print(f"{name:>18s}: {len(mesh.vertices):6d} vertices, watertight={mesh.is_watertight()}, "
          f"euler={mesh.euler_characteristic():+d}, squared CD={cd:.2e}")

# %%
# The torus has genus one, so its Euler characteristic is 0 rather than 2.
# The Chamfer figures, around 1e-3, come almost entirely from sampling two
# clouds of 2048 points and set the floor any learned decoder is measured against.
