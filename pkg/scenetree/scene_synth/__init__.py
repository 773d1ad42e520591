from scenetree.scene_synth.canvas import SceneCanvas, feather_weights
from scenetree.scene_synth.journal import LevelRecord, PlacementRecord, SynthesisJournal
from scenetree.scene_synth.pipeline import (
    GridFrame,
    SynthesisOptions,
    complete_scene,
    fuse_step,
    fused_sample,
    generate_coarse,
    generate_scene,
    inpaint_patch,
    refine_level,
    scene_extent_voxels,
)
from scenetree.scene_synth.planning import PatchPlacement, PatchSchedule, plan_patches
