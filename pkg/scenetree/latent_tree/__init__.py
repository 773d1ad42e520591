from scenetree.latent_tree.codec import (
    CodecOutput,
    LatentGrid,
    LevelCodec,
    LevelCodecConfig,
    decode_level,
    encode_level,
)
from scenetree.latent_tree.tree import (
    LatentTree,
    TreeLevel,
    build_tree,
    encode_scene,
    evaluate_reconstruction,
    load_tree,
    reconstruct,
    save_tree,
)
