"""Analytic shapes, sampling, meshing and point-set distances."""

from .distances import chamfer_distance, hausdorff_unidirectional
from .io import read_obj, read_xyz, write_obj, write_xyz
from .meshing import Mesh, grid_points, marching_cubes, mesh_sample_points
from .sampling import (SDFSamples, crop_partial, partial_from_full, sample_queries,
                       sample_surface)
from .shapes import (CATEGORIES, ShapeSpec, box, intersection, make_shape_set, random_shape,
                     sdf_eval, sdf_gradient, sphere, subtraction, torus, union)

__all__ = [
    "CATEGORIES", "Mesh", "SDFSamples", "ShapeSpec", "box", "chamfer_distance", "crop_partial",
    "grid_points", "hausdorff_unidirectional", "intersection", "make_shape_set", "marching_cubes",
    "mesh_sample_points", "partial_from_full", "random_shape", "read_obj", "read_xyz",
    "sample_queries", "sample_surface", "sdf_eval", "sdf_gradient", "sphere", "subtraction",
    "torus", "union", "write_obj", "write_xyz",
]
