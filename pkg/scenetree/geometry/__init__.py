from scenetree.geometry.mesh import TriangleMesh, augment_mesh, extract_mesh, load_mesh, save_mesh
from scenetree.geometry.procedural import SceneSpec, generate_layout, generate_scene
from scenetree.geometry.tudf import (
    DEFAULT_TRUNCATION,
    DEFAULT_VOXEL_SIZE,
    TUDFGrid,
    augment,
    downsample_grid,
    load_grid,
    load_mask,
    pad_to_multiple,
    save_grid,
    save_mask,
    voxelize_tudf,
)
