from .intersect import intersecting_faces, self_intersection_fraction, triangle_pairs_intersect
from .io import FormatError, read_obj, read_ply, write_obj, write_ply
from .mesh import (
    MeshError,
    TriMesh,
    denormalize,
    face_quality,
    icosphere,
    normalize_points,
    normalize_shape,
    triangle_quality_loss,
    uniform_laplacian,
    vertex_adjacency,
)
from .remesh import SurfaceProjector, isotropic_remesh, tangential_relaxation
from .sampling import (
    Plane,
    SliceSamples,
    SurfaceSamples,
    plane_mesh_intersection_samples,
    plane_segments,
    sample_surface,
)
