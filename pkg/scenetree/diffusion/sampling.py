import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from scenetree.diffusion.schedule import NoiseSchedule
from scenetree.diffusion.unet import KIND_GEOMETRY_LATENT, KIND_LATENT
from scenetree.errors import ScheduleError, SerializationError, ShapeMismatchError

SAMPLERS = ("ddpm", "ddim")
DEFAULT_DDIM_STEPS = 50

_PATCH_HEADER = struct.Struct("<4sHHII3I")  # magic, version, level, kind, channels, dims
_KIND_CODES = {KIND_LATENT: 0, KIND_GEOMETRY_LATENT: 1}


@dataclass(frozen=True)
class LatentPatch:
    """Patch in model space, [channels, X, Y, Z]. geometry+latent patches carry the
    geometry in channel 0."""

    values: np.ndarray
    level: int
    kind: str

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", values)
        if self.kind not in _KIND_CODES:
            raise ShapeMismatchError(f"unknown patch kind {self.kind!r}")
        if values.ndim != 4:
            raise ShapeMismatchError(f"latent patch must be [C, X, Y, Z], got {values.shape}")
        if self.kind == KIND_GEOMETRY_LATENT and values.shape[0] < 2:
            raise ShapeMismatchError("a geometry+latent patch needs 1 + C channels")
        if not np.all(np.isfinite(values)):
            raise ShapeMismatchError("latent patch contains non-finite values")

    @property
    def channels(self) -> int:
        return self.values.shape[0]


def save_patch(patch: LatentPatch, path: str):
    with open(path, "wb") as f:
        f.write(_PATCH_HEADER.pack(b"LPAT", 1, patch.level, _KIND_CODES[patch.kind], patch.channels, *patch.values.shape[1:]))
        f.write(patch.values.astype("<f4", copy=False).tobytes(order="C"))


def load_patch(path: str) -> LatentPatch:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PATCH_HEADER.size:
        raise SerializationError(f"{path}: truncated patch header")
    magic, version, level, kind_code, channels, x, y, z = _PATCH_HEADER.unpack_from(raw)
    if magic != b"LPAT" or version != 1:
        raise SerializationError(f"{path}: not a v1 latent patch (magic={magic!r})")
    kinds = {code: kind for kind, code in _KIND_CODES.items()}
    if kind_code not in kinds:
        raise SerializationError(f"{path}: unknown patch kind code {kind_code}")
    shape = (channels, x, y, z)
    payload = raw[_PATCH_HEADER.size:]
    if len(payload) != 4 * int(np.prod(shape)):
        raise SerializationError(f"{path}: payload has {len(payload)} bytes, expected {4 * int(np.prod(shape))}")
    return LatentPatch(np.frombuffer(payload, dtype="<f4").reshape(shape), level=level, kind=kinds[kind_code])


def model_device_dtype(model: torch.nn.Module) -> Tuple[torch.device, torch.dtype]:
    parameter = next(model.parameters(), None)
    if parameter is None:
        return torch.device("cpu"), torch.float32
    return parameter.device, parameter.dtype


def randn(
    shape: Sequence[int], generator: Optional[torch.Generator], device: torch.device, dtype: torch.dtype
) -> torch.Tensor:
    """Gaussian draw on the generator's device, moved afterwards so streams do not depend on `device`"""
    source = generator.device if generator is not None else torch.device("cpu")
    return torch.randn(tuple(shape), generator=generator, device=source, dtype=torch.float32).to(
        device=device, dtype=dtype
    )


def predict_noise(
    denoiser: torch.nn.Module, z_t: torch.Tensor, t: int, c: Optional[torch.Tensor]
) -> torch.Tensor:
    conditional = getattr(denoiser, "conditional", False)
    if conditional and c is None:
        raise ShapeMismatchError("conditional denoiser called without a geometry condition")
    if not conditional and c is not None:
        raise ShapeMismatchError("unconditional denoiser called with a condition")
    timestep = torch.full((z_t.shape[0],), int(t), device=z_t.device, dtype=torch.long)
    output = denoiser(noisy_latent=z_t, timestep=timestep, condition=c)
    return output.sample if hasattr(output, "sample") else output


def reverse_variance(schedule: NoiseSchedule, t: int, prev_t: int) -> float:
    alpha_bar_t, alpha_bar_prev = schedule.alpha_bar(t), schedule.alpha_bar(prev_t)
    return (1.0 - alpha_bar_t / alpha_bar_prev) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)


def reverse_update(
    schedule: NoiseSchedule,
    z_t: torch.Tensor,
    eps: torch.Tensor,
    t: int,
    prev_t: int,
    sampler: str,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """One reverse step t -> prev_t from a noise prediction.

    ddim is the deterministic (eta = 0) update. ddpm samples the forward posterior
    q(z_prev | z_t, z0_hat) between possibly strided steps; its variance is 0 at prev_t = 0.
    """
    if sampler not in SAMPLERS:
        raise ScheduleError(f"unknown sampler {sampler!r}, expected one of {SAMPLERS}")
    if not 0 <= prev_t < t:
        raise ScheduleError(f"reverse step must go down: t={t}, prev_t={prev_t}")
    schedule.check_timestep(t, allow_zero=False)
    alpha_bar_t, alpha_bar_prev = schedule.alpha_bar(t), schedule.alpha_bar(prev_t)

    z0_hat = (z_t - math.sqrt(1.0 - alpha_bar_t) * eps) / math.sqrt(alpha_bar_t)
    if sampler == "ddim":
        return math.sqrt(alpha_bar_prev) * z0_hat + math.sqrt(1.0 - alpha_bar_prev) * eps

    alpha_step = alpha_bar_t / alpha_bar_prev
    mean = (
        math.sqrt(alpha_bar_prev) * (1.0 - alpha_step) / (1.0 - alpha_bar_t) * z0_hat
        + math.sqrt(alpha_step) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t) * z_t
    )
    variance = reverse_variance(schedule, t, prev_t)
    if variance <= 0.0:
        return mean
    if noise is None:
        raise ScheduleError("ddpm step with positive variance needs a noise tensor")
    return mean + math.sqrt(variance) * noise


def needs_noise(schedule: NoiseSchedule, sampler: str, t: int, prev_t: int) -> bool:
    return sampler == "ddpm" and reverse_variance(schedule, t, prev_t) > 0.0


@torch.no_grad()
def denoise_step(
    denoiser: torch.nn.Module,
    schedule: NoiseSchedule,
    z_t: torch.Tensor,
    t: int,
    c: Optional[torch.Tensor] = None,
    sampler: str = "ddim",
    generator: Optional[torch.Generator] = None,
    prev_t: Optional[int] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """z_t -> z_{prev_t} (prev_t defaults to t - 1).

    For ddpm the posterior noise is drawn from `generator` unless `noise` is given.
    """
    prev_t = t - 1 if prev_t is None else prev_t
    eps = predict_noise(denoiser, z_t, t, c)
    if noise is None and needs_noise(schedule, sampler, t, prev_t):
        noise = randn(z_t.shape, generator, z_t.device, z_t.dtype)
    return reverse_update(schedule, z_t, eps, t, prev_t, sampler, noise=noise)


def default_num_steps(schedule: NoiseSchedule, sampler: str) -> int:
    if sampler == "ddpm":
        return schedule.num_timesteps
    return min(DEFAULT_DDIM_STEPS, schedule.num_timesteps)


@torch.no_grad()
def sample_patch(
    denoiser: torch.nn.Module,
    schedule: NoiseSchedule,
    shape: Sequence[int],
    c: Optional[torch.Tensor] = None,
    sampler: str = "ddim",
    generator: Optional[torch.Generator] = None,
    num_steps: Optional[int] = None,
    progress: bool = False,
) -> torch.Tensor:
    """Full reverse trajectory from z_T ~ N(0, I) of `shape` ([B, channels, X, Y, Z])"""
    device, dtype = model_device_dtype(denoiser)
    num_steps = num_steps or default_num_steps(schedule, sampler)
    z = randn(shape, generator, device, dtype)
    if c is not None:
        c = c.to(device=device, dtype=dtype)
    steps = schedule.sampling_timesteps(num_steps)
    for t, prev_t in tqdm(steps, desc="sampling", disable=not progress):
        z = denoise_step(denoiser, schedule, z, t, c, sampler, generator, prev_t=prev_t)
    return z


def to_model_space(codec, geometry: torch.Tensor, latent: torch.Tensor, level: int):
    """Raw (L_i, H_i) batches -> (z, c) as the level-i denoiser sees them."""
    if level == 1:
        return torch.cat([codec.standardize_geometry(geometry), codec.standardize_latent(latent)], dim=1), None
    return codec.standardize_latent(latent), codec.standardize_geometry(geometry)


def from_model_space(codec, z: torch.Tensor, level: int):
    """Inverse of to_model_space on the generated tensor: (geometry or None, latent).
    Generated geometry is clamped to [0, truncation]."""
    if level == 1:
        return codec.destandardize_geometry(z[:, :1]), codec.destandardize_latent(z[:, 1:])
    return None, codec.destandardize_latent(z)
