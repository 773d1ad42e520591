from scenetree.diffusion.sampling import (
    SAMPLERS,
    LatentPatch,
    denoise_step,
    from_model_space,
    load_patch,
    predict_noise,
    reverse_update,
    sample_patch,
    save_patch,
    to_model_space,
)
from scenetree.diffusion.schedule import NoiseSchedule, q_sample
from scenetree.diffusion.unet import Denoiser, DenoiserConfig, DenoiserOutput
