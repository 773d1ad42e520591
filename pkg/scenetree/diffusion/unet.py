import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from transformers import PretrainedConfig, PreTrainedModel
from transformers.utils import ModelOutput

from scenetree.errors import ShapeMismatchError

KIND_LATENT = "latent"
KIND_GEOMETRY_LATENT = "geometry+latent"


class DenoiserConfig(PretrainedConfig):
    model_type = "scenetree_denoiser"

    def __init__(
        self,
        level: int = 1,
        latent_channels: int = 4,
        base_channels: int = 32,
        channel_mults: Sequence[int] = (1, 2, 4),
        num_res_blocks: int = 1,
        norm_groups: int = 8,
        schedule_family: str = "cosine",
        num_timesteps: int = 1000,
        patch_size: int = 16,
        **kwargs,
    ):
        """
        Args:
            level (int): tree level the model generates. Level 1 denoises the joint
                [L_1, H_1] tensor unconditionally, higher levels denoise H_i given L_i
            channel_mults (Sequence[int]): width multiplier per resolution stage
            patch_size (int): cubic patch edge (voxels at this level) used in training and synthesis
        """
        self.level = level
        self.latent_channels = latent_channels
        self.base_channels = base_channels
        self.channel_mults = list(channel_mults)
        self.num_res_blocks = num_res_blocks
        self.norm_groups = norm_groups
        self.schedule_family = schedule_family
        self.num_timesteps = num_timesteps
        self.patch_size = patch_size
        super().__init__(**kwargs)

    @property
    def conditional(self) -> bool:
        return self.level > 1

    @property
    def sample_channels(self) -> int:
        return self.latent_channels if self.conditional else 1 + self.latent_channels

    @property
    def kind(self) -> str:
        return KIND_LATENT if self.conditional else KIND_GEOMETRY_LATENT


@dataclass
class DenoiserOutput(ModelOutput):
    loss: Optional[torch.FloatTensor] = None
    sample: torch.FloatTensor = None


def timestep_embedding(timesteps: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, device=timesteps.device, dtype=torch.float32) / half
    )
    args = timesteps[:, None].float() * freqs[None]
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))
    return embedding


def _groups(channels: int, groups: int) -> int:
    return math.gcd(channels, groups)


class TimeResBlock3d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_channels, groups), in_channels)
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(_groups(out_channels, groups), out_channels)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv3d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(PreTrainedModel):
    """3D UNet predicting the noise added to a latent patch.

    Conditional models receive the 1-channel geometry patch concatenated to the noisy input.
    """

    config_class = DenoiserConfig
    base_model_prefix = "denoiser"
    main_input_name = "noisy_latent"

    def __init__(self, config: DenoiserConfig):
        super().__init__(config)
        base, groups = config.base_channels, config.norm_groups
        time_dim = 4 * base
        self.time_mlp = nn.Sequential(nn.Linear(base, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))

        in_channels = config.sample_channels + (1 if config.conditional else 0)
        self.conv_in = nn.Conv3d(in_channels, base, 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        skip_channels = []
        channels = base
        for stage, mult in enumerate(config.channel_mults):
            blocks = nn.ModuleList()
            for _ in range(config.num_res_blocks):
                blocks.append(TimeResBlock3d(channels, base * mult, time_dim, groups))
                channels = base * mult
            self.down_blocks.append(blocks)
            skip_channels.append(channels)
            last = stage == len(config.channel_mults) - 1
            self.downsamplers.append(
                nn.Identity() if last else nn.Conv3d(channels, channels, 3, stride=2, padding=1)
            )

        self.mid_blocks = nn.ModuleList(
            [TimeResBlock3d(channels, channels, time_dim, groups) for _ in range(2)]
        )

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for stage, mult in reversed(list(enumerate(config.channel_mults))):
            out_channels = base * mult
            blocks = nn.ModuleList([TimeResBlock3d(channels + skip_channels[stage], out_channels, time_dim, groups)])
            for _ in range(config.num_res_blocks - 1):
                blocks.append(TimeResBlock3d(out_channels, out_channels, time_dim, groups))
            channels = out_channels
            self.up_blocks.append(blocks)
            self.upsamplers.append(
                nn.Identity() if stage == 0 else nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv3d(channels, base * config.channel_mults[stage - 1], 3, padding=1),
                )
            )
            if stage > 0:
                channels = base * config.channel_mults[stage - 1]

        self.norm_out = nn.GroupNorm(_groups(channels, groups), channels)
        self.conv_out = nn.Conv3d(channels, config.sample_channels, 3, padding=1)
        self.post_init()
        # zero-initialized head: an untrained model predicts zero noise
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @property
    def conditional(self) -> bool:
        return self.config.conditional

    @property
    def spatial_multiple(self) -> int:
        return 2 ** (len(self.config.channel_mults) - 1)

    def check_inputs(self, noisy_latent: torch.Tensor, condition: Optional[torch.Tensor]):
        if noisy_latent.dim() != 5 or noisy_latent.shape[1] != self.config.sample_channels:
            raise ShapeMismatchError(
                f"level {self.config.level} denoiser expects [B, {self.config.sample_channels}, X, Y, Z], "
                f"got {tuple(noisy_latent.shape)}"
            )
        if any(d % self.spatial_multiple for d in noisy_latent.shape[2:]):
            raise ShapeMismatchError(
                f"patch dims {tuple(noisy_latent.shape[2:])} must be multiples of {self.spatial_multiple}"
            )
        if self.conditional and condition is None:
            raise ShapeMismatchError(f"level {self.config.level} denoiser requires a geometry condition")
        if not self.conditional and condition is not None:
            raise ShapeMismatchError("the level 1 denoiser is unconditional; got a condition grid")
        if condition is not None and (
            condition.shape[0] != noisy_latent.shape[0]
            or condition.shape[1] != 1
            or condition.shape[2:] != noisy_latent.shape[2:]
        ):
            raise ShapeMismatchError(
                f"condition {tuple(condition.shape)} does not match latent {tuple(noisy_latent.shape)}"
            )

    def forward(
        self,
        noisy_latent: torch.Tensor,
        timestep: torch.Tensor,
        condition: Optional[torch.Tensor] = None,
        noise: Optional[torch.Tensor] = None,
    ) -> DenoiserOutput:
        """
        Args:
            noisy_latent (torch.Tensor): z_t, [B, sample_channels, X, Y, Z]
            timestep (torch.Tensor): [B] integer timesteps in [1, T]
            condition (torch.Tensor): standardized geometry patch [B, 1, X, Y, Z], conditional levels only
            noise (torch.Tensor): the noise used to build z_t; when given the epsilon MSE loss is returned

        Returns:
            DenoiserOutput: predicted noise in `sample`, loss if `noise` was given
        """
        self.check_inputs(noisy_latent, condition)
        if timestep.dim() == 0:
            timestep = timestep.expand(noisy_latent.shape[0])
        t_emb = self.time_mlp(timestep_embedding(timestep, self.config.base_channels).to(noisy_latent.dtype))

        x = noisy_latent if condition is None else torch.cat([noisy_latent, condition], dim=1)
        x = self.conv_in(x)
        skips = []
        for blocks, downsample in zip(self.down_blocks, self.downsamplers):
            for block in blocks:
                x = block(x, t_emb)
            skips.append(x)
            x = downsample(x)
        for block in self.mid_blocks:
            x = block(x, t_emb)
        for blocks, upsample in zip(self.up_blocks, self.upsamplers):
            x = torch.cat([x, skips.pop()], dim=1)
            for block in blocks:
                x = block(x, t_emb)
            x = upsample(x)
        prediction = self.conv_out(F.silu(self.norm_out(x)))

        loss = None
        if noise is not None:
            loss = F.mse_loss(prediction, noise)
        return DenoiserOutput(loss=loss, sample=prediction)
