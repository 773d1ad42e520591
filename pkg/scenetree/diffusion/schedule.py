import math
from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np
import torch

from scenetree.errors import ScheduleError

SCHEDULE_FAMILIES = ("cosine", "linear")
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


def _cosine_alphas_cumprod(num_timesteps: int) -> np.ndarray:
    steps = np.arange(num_timesteps + 1, dtype=np.float64) / num_timesteps
    f = np.cos((steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
    closed_form = f / f[0]
    betas = np.clip(1.0 - closed_form[1:] / closed_form[:-1], 0.0, MAX_BETA)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def _linear_alphas_cumprod(num_timesteps: int) -> np.ndarray:
    # endpoints rescaled so that T=1000 gives the usual 1e-4 .. 2e-2 range
    scale = 1000 / num_timesteps
    betas = np.linspace(scale * 1e-4, scale * 2e-2, num_timesteps, dtype=np.float64)
    return np.concatenate([[1.0], np.cumprod(1.0 - np.clip(betas, 0.0, MAX_BETA))])


@dataclass(frozen=True)
class NoiseSchedule:
    """alphas_cumprod[t] for t = 0..T, computed in float64; alphas_cumprod[0] == 1 exactly"""

    family: str
    num_timesteps: int
    alphas_cumprod: np.ndarray

    @classmethod
    def create(cls, family: str = "cosine", num_timesteps: int = 1000) -> "NoiseSchedule":
        if family not in SCHEDULE_FAMILIES:
            raise ScheduleError(f"unknown schedule family {family!r}, expected one of {SCHEDULE_FAMILIES}")
        if num_timesteps < 1:
            raise ScheduleError(f"num_timesteps must be >= 1, got {num_timesteps}")
        if family == "cosine":
            alphas_cumprod = _cosine_alphas_cumprod(num_timesteps)
        else:
            alphas_cumprod = _linear_alphas_cumprod(num_timesteps)
        return cls(family=family, num_timesteps=num_timesteps, alphas_cumprod=alphas_cumprod)

    def check_timestep(self, t: int, allow_zero: bool = True):
        lo = 0 if allow_zero else 1
        if not lo <= int(t) <= self.num_timesteps:
            raise ScheduleError(f"timestep {t} outside [{lo}, {self.num_timesteps}]")

    def alpha_bar(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.alphas_cumprod[int(t)])

    def sampling_timesteps(self, num_steps: int) -> List[Tuple[int, int]]:
        """(t, prev_t) pairs walking from T down to 0 in `num_steps` evenly strided steps"""
        if not 1 <= num_steps <= self.num_timesteps:
            raise ScheduleError(f"num_steps must lie in [1, {self.num_timesteps}], got {num_steps}")
        ts = np.round(np.linspace(self.num_timesteps, 0, num_steps + 1)).astype(int).tolist()
        return list(zip(ts[:-1], ts[1:]))


def _coefficients(schedule: NoiseSchedule, t: Union[int, torch.Tensor], like: torch.Tensor):
    if isinstance(t, torch.Tensor):
        t_index = t.detach().cpu().long().numpy().reshape(-1)
    else:
        t_index = np.array([int(t)])
    if t_index.min() < 0 or t_index.max() > schedule.num_timesteps:
        raise ScheduleError(f"timesteps {t_index.tolist()} outside [0, {schedule.num_timesteps}]")
    alpha_bar = schedule.alphas_cumprod[t_index]
    shape = (-1,) + (1,) * (like.dim() - 1)
    signal = torch.from_numpy(np.sqrt(alpha_bar)).to(device=like.device, dtype=like.dtype).view(shape)
    sigma = torch.from_numpy(np.sqrt(1.0 - alpha_bar)).to(device=like.device, dtype=like.dtype).view(shape)
    return signal, sigma


def q_sample(
    schedule: NoiseSchedule, z0: torch.Tensor, t: Union[int, torch.Tensor], noise: torch.Tensor
) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * noise.

    `t` is an int or a [B] tensor. t = 0 is accepted and returns z0 unchanged.
    """
    if noise.shape != z0.shape:
        raise ScheduleError(f"noise shape {tuple(noise.shape)} != z0 shape {tuple(z0.shape)}")
    signal, sigma = _coefficients(schedule, t, z0)
    return signal * z0 + sigma * noise
