from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from transformers import PretrainedConfig, PreTrainedModel
from transformers.utils import ModelOutput

from scenetree.errors import ShapeMismatchError
from scenetree.geometry.tudf import TUDFGrid, clamp_to_truncation

DEFAULT_LATENT_CHANNELS = 4


@dataclass(frozen=True)
class LatentGrid:
    """C-channel feature grid [C, X, Y, Z] co-registered with the TUDF grid of the same level"""

    values: np.ndarray
    level: int

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", values)
        if values.ndim != 4:
            raise ShapeMismatchError(f"latent grid must be [C, X, Y, Z], got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ShapeMismatchError(f"latent grid at level {self.level} contains non-finite values")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape[1:])


class LevelCodecConfig(PretrainedConfig):
    model_type = "scenetree_level_codec"

    def __init__(
        self,
        level: int = 1,
        factor: int = 2,
        latent_channels: int = DEFAULT_LATENT_CHANNELS,
        hidden_channels: int = 32,
        num_res_blocks: int = 1,
        truncation: float = 0.1,
        factorized: bool = True,
        tile_size: int = 16,
        reconstruction_plateau: Optional[float] = None,
        **kwargs,
    ):
        """
        Args:
            level (int): coarse level i this codec produces; it maps L_{i+1} <-> (L_i, H_i)
            factor (int): integer resolution factor between level i and i+1
            factorized (bool): False builds the cascaded-latent baseline, whose decoder
                only sees a (1 + C)-channel latent and no pooled geometry
            tile_size (int): output tile edge (coarse voxels) used when encoding whole scenes
            reconstruction_plateau (float): smoothed training loss at the end of training
        """
        self.level = level
        self.factor = factor
        self.latent_channels = latent_channels
        self.hidden_channels = hidden_channels
        self.num_res_blocks = num_res_blocks
        self.truncation = truncation
        self.factorized = factorized
        self.tile_size = tile_size
        self.reconstruction_plateau = reconstruction_plateau
        super().__init__(**kwargs)

    @property
    def code_channels(self) -> int:
        return self.latent_channels if self.factorized else 1 + self.latent_channels


@dataclass
class CodecOutput(ModelOutput):
    loss: Optional[torch.FloatTensor] = None
    reconstruction: torch.FloatTensor = None
    coarse: torch.FloatTensor = None
    latent: torch.FloatTensor = None


class ResBlock3d(nn.Module):
    """Pre-activation residual block without normalization, so outputs stay local
    (tile-wise encoding must match whole-scene encoding)."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(x))
        h = self.conv2(F.silu(h))
        return x + h


class LevelCodec(PreTrainedModel):
    config_class = LevelCodecConfig
    base_model_prefix = "codec"
    main_input_name = "patch"

    def __init__(self, config: LevelCodecConfig):
        super().__init__(config)
        width, f, blocks = config.hidden_channels, config.factor, config.num_res_blocks

        self.encoder = nn.Sequential(
            nn.Conv3d(1, width, 3, padding=1),
            *[ResBlock3d(width) for _ in range(blocks)],
            nn.Conv3d(width, width, kernel_size=f, stride=f),
            *[ResBlock3d(width) for _ in range(blocks)],
            nn.SiLU(),
            nn.Conv3d(width, config.code_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv3d(1 + config.latent_channels, width, 3, padding=1),
            *[ResBlock3d(width) for _ in range(blocks)],
            nn.Upsample(scale_factor=f, mode="nearest"),
            nn.Conv3d(width, width, 3, padding=1),
            *[ResBlock3d(width) for _ in range(blocks)],
            nn.SiLU(),
            nn.Conv3d(width, 1, 3, padding=1),
        )

        code = config.code_channels
        self.register_buffer("latent_mean", torch.zeros(code))
        self.register_buffer("latent_std", torch.ones(code))
        self.register_buffer("geometry_mean", torch.zeros(1))
        self.register_buffer("geometry_std", torch.ones(1))
        self.post_init()

    @property
    def receptive_halo(self) -> int:
        """Context (coarse voxels) an encoder output voxel sees beyond its own pooling window"""
        blocks, f = self.config.num_res_blocks, self.config.factor
        fine_radius = 1 + 2 * blocks
        return -(-fine_radius // f) + 2 * blocks

    def _check_divisible(self, patch: torch.Tensor):
        f = self.config.factor
        if patch.dim() != 5 or patch.shape[1] != 1:
            raise ShapeMismatchError(f"expected a [B, 1, X, Y, Z] TUDF patch, got {tuple(patch.shape)}")
        if any(d % f for d in patch.shape[2:]):
            raise ShapeMismatchError(
                f"patch dims {tuple(patch.shape[2:])} are not divisible by the level factor {f}"
            )

    def pool(self, patch: torch.Tensor) -> torch.Tensor:
        # float64 accumulation keeps the window mean correctly rounded in float32
        pooled = F.avg_pool3d(patch.double(), kernel_size=self.config.factor)
        return pooled.to(patch.dtype)

    def encode(self, patch: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """L_{i+1} -> (L_i by average pooling, H_i predicted by the encoder)"""
        self._check_divisible(patch)
        return self.pool(patch), self.encoder(patch)

    def _decode_raw(self, coarse: torch.Tensor, latent: torch.Tensor) -> torch.Tensor:
        if coarse.shape[2:] != latent.shape[2:] or coarse.shape[0] != latent.shape[0]:
            raise ShapeMismatchError(
                f"geometry {tuple(coarse.shape)} and latent {tuple(latent.shape)} are not co-registered"
            )
        if latent.shape[1] != self.config.code_channels:
            raise ShapeMismatchError(
                f"expected {self.config.code_channels} latent channels, got {latent.shape[1]}"
            )
        if self.config.factorized:
            hidden = self.decoder(torch.cat([coarse, latent], dim=1))
            return F.interpolate(coarse, scale_factor=self.config.factor, mode="nearest") + hidden
        return self.decoder(latent)

    def decode(self, coarse: torch.Tensor, latent: torch.Tensor) -> torch.Tensor:
        """(L_i, H_i) -> L_{i+1}, clamped to [0, truncation]"""
        return self._decode_raw(coarse, latent).clamp(0.0, self.config.truncation)

    def forward(self, patch: torch.Tensor) -> CodecOutput:
        coarse, latent = self.encode(patch)
        raw = self._decode_raw(coarse, latent)
        # l2 on the unclamped output; clamping can only move it closer to targets in [0, tau]
        loss = F.mse_loss(raw, patch)
        return CodecOutput(
            loss=loss,
            reconstruction=raw.clamp(0.0, self.config.truncation),
            coarse=coarse,
            latent=latent,
        )

    def standardize_latent(self, latent: torch.Tensor) -> torch.Tensor:
        return (latent - self.latent_mean.view(1, -1, 1, 1, 1)) / self.latent_std.view(1, -1, 1, 1, 1)

    def destandardize_latent(self, latent: torch.Tensor) -> torch.Tensor:
        return latent * self.latent_std.view(1, -1, 1, 1, 1) + self.latent_mean.view(1, -1, 1, 1, 1)

    def standardize_geometry(self, geometry: torch.Tensor) -> torch.Tensor:
        return (geometry - self.geometry_mean) / self.geometry_std

    def destandardize_geometry(self, geometry: torch.Tensor) -> torch.Tensor:
        return (geometry * self.geometry_std + self.geometry_mean).clamp(0.0, self.config.truncation)

    @torch.no_grad()
    def set_standardization(self, latent_mean, latent_std, geometry_mean, geometry_std):
        self.latent_mean.copy_(torch.as_tensor(latent_mean, dtype=self.latent_mean.dtype))
        self.latent_std.copy_(torch.as_tensor(latent_std, dtype=self.latent_std.dtype).clamp_min(1e-6))
        self.geometry_mean.fill_(float(geometry_mean))
        self.geometry_std.fill_(max(float(geometry_std), 1e-6))


def _grid_tensor(codec: LevelCodec, values: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(values)).to(device=codec.device, dtype=codec.dtype)


@torch.no_grad()
def encode_level(codec: LevelCodec, patch: TUDFGrid) -> Tuple[TUDFGrid, LatentGrid]:
    """Factorize a level i+1 patch into the level i geometry and latent grids"""
    coarse, latent = codec.encode(_grid_tensor(codec, patch.values)[None, None])
    f = codec.config.factor
    geometry = patch.with_values(
        clamp_to_truncation(coarse[0, 0].float().cpu().numpy(), patch.truncation),
        voxel_size=patch.voxel_size * f,
    )
    return geometry, LatentGrid(latent[0].float().cpu().numpy(), level=codec.config.level)


@torch.no_grad()
def decode_level(codec: LevelCodec, coarse: TUDFGrid, latent: LatentGrid) -> TUDFGrid:
    """Reconstruct the level i+1 grid from level i geometry and latent grids"""
    if coarse.dims != latent.dims:
        raise ShapeMismatchError(f"geometry dims {coarse.dims} != latent dims {latent.dims}")
    fine = codec.decode(
        _grid_tensor(codec, coarse.values)[None, None], _grid_tensor(codec, latent.values)[None]
    )
    return coarse.with_values(
        clamp_to_truncation(fine[0, 0].float().cpu().numpy(), coarse.truncation),
        voxel_size=coarse.voxel_size / codec.config.factor,
    )
