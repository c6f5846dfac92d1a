"""Dual-domain patch discriminator: a strided spatial branch whose bottleneck
grid assigns one feature vector per patch, a per-patch FFT frequency branch,
and a stride-1 auto-encoder head that emits an n x n inharmony grid
(target 1 on pasted-object patches, 0 on background patches).

Input side length must be 64 * n so that six stride-2 blocks land exactly on
an n x n bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import spectral

SPATIAL_BASE = (64, 128, 256, 512, 512, 512)
FREQ_BASE = (256, 512, 512)
LEAKY_SLOPE = 0.2

VALID_PATCH_COUNTS = (2, 4, 8)

# after this many stride-2 blocks the intermediate map is tapped for the
# frequency branch; side/8 with n patches per side gives 8x8 patches, big
# enough for a useful spectrum and small enough to reduce to 1x1 in three
# stride-2 stages
DEFAULT_TAP_INDEX = 3


def _scale(base, width_multiplier: float):
    if width_multiplier <= 0:
        raise ValueError(f"width_multiplier must be positive, got {width_multiplier}")
    return tuple(max(1, round(c * width_multiplier)) for c in base)


def _ds_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
    )


def split_patches(fdm: torch.Tensor, n: int) -> torch.Tensor:
    """Tile (B, C, m, m) into (B, n, n, C, m/n, m/n) non-overlapping patches;
    patch (i, j) covers rows [i*m/n, (i+1)*m/n)."""
    if fdm.ndim != 4:
        raise ValueError(f"expected (B, C, m, m), got shape {tuple(fdm.shape)}")
    b, c, mh, mw = fdm.shape
    if mh != mw:
        raise ValueError(f"expected a square map, got {mh}x{mw}")
    if mh % n != 0:
        raise ValueError(f"map side {mh} not divisible by patch count {n}")
    p = mh // n
    x = fdm.reshape(b, c, n, p, n, p)
    return x.permute(0, 2, 4, 1, 3, 5).contiguous()


def reassemble_patches(patches: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`split_patches`."""
    b, n1, n2, c, p, _ = patches.shape
    x = patches.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, n1 * p, n2 * p)


def assemble_freq_map(descriptors: torch.Tensor) -> torch.Tensor:
    """Place per-patch descriptors on the grid: (B, n, n, c) -> (B, c, n, n)."""
    if descriptors.ndim != 4:
        raise ValueError(f"expected (B, n, n, c) descriptors, got {tuple(descriptors.shape)}")
    return descriptors.permute(0, 3, 1, 2).contiguous()


class SpatialBranch(nn.Module):
    """Six stride-2 conv blocks; returns the n x n bottleneck and the tapped
    intermediate map used by the frequency branch."""

    def __init__(self, width_multiplier: float = 1.0, tap_index: int = DEFAULT_TAP_INDEX):
        super().__init__()
        chs = _scale(SPATIAL_BASE, width_multiplier)
        if not 1 <= tap_index <= len(chs):
            raise ValueError(f"tap_index must be in 1..{len(chs)}, got {tap_index}")
        ins = (3,) + chs[:-1]
        self.blocks = nn.ModuleList(_ds_block(i, o) for i, o in zip(ins, chs))
        self.tap_index = tap_index
        self.out_channels = chs[-1]
        self.tap_channels = chs[tap_index - 1]

    def forward(self, image: torch.Tensor):
        x = image
        tapped = None
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i == self.tap_index:
                tapped = x
        return x, tapped


class FrequencyBranch(nn.Module):
    """Per-patch frequency descriptor: full FFT (both positive and negative
    terms, packed real/imag) -> three stride-2 conv blocks -> flatten -> FC."""

    def __init__(self, in_channels: int, width_multiplier: float = 1.0, patch_side: int = 8):
        super().__init__()
        if patch_side % 8 != 0:
            raise ValueError(f"patch side must be divisible by 8, got {patch_side}")
        chs = _scale(FREQ_BASE, width_multiplier)
        ins = (2 * in_channels,) + chs[:-1]
        self.blocks = nn.Sequential(*(_ds_block(i, o) for i, o in zip(ins, chs)))
        reduced = patch_side // 8
        self.fc = nn.Linear(chs[-1] * reduced * reduced, _scale((256,), width_multiplier)[0])
        self.patch_side = patch_side
        self.out_features = self.fc.out_features

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-1] != patches.shape[-2]:
            raise ValueError(f"patches must be square, got {tuple(patches.shape[-2:])}")
        if patches.shape[-1] % 8 != 0:
            raise ValueError(
                f"patch side must be divisible by 8 (three stride-2 stages), "
                f"got {patches.shape[-1]}"
            )
        if patches.shape[-1] != self.patch_side:
            raise ValueError(
                f"branch was built for {self.patch_side}x{self.patch_side} patches, "
                f"got {patches.shape[-1]}x{patches.shape[-1]}"
            )
        z = spectral.fft2_packed(patches)
        z = self.blocks(z)
        return self.fc(z.flatten(1))


class PatchHead(nn.Module):
    """Stride-1 auto-encoder over the n x n grid: two downsample-style blocks
    (LeakyReLU), two upsample-style blocks (ReLU), then a linear 1-channel
    conv (least-squares targets, so no output activation)."""

    def __init__(self, in_channels: int, width_multiplier: float = 1.0):
        super().__init__()
        hidden = _scale((256,), width_multiplier)[0]

        def block(i, o, act):
            return nn.Sequential(nn.Conv2d(i, o, 3, stride=1, padding=1), nn.BatchNorm2d(o), act)

        self.net = nn.Sequential(
            block(in_channels, hidden, nn.LeakyReLU(LEAKY_SLOPE, inplace=True)),
            block(hidden, hidden, nn.LeakyReLU(LEAKY_SLOPE, inplace=True)),
            block(hidden, hidden, nn.ReLU(inplace=True)),
            block(hidden, hidden, nn.ReLU(inplace=True)),
            nn.Conv2d(hidden, 1, 3, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x)


@dataclass
class DiscriminatorConfig:
    n: int = 4
    width_multiplier: float = 1.0
    use_freq_branch: bool = True
    tap_index: int = DEFAULT_TAP_INDEX
    seed: int = 0

    def __post_init__(self):
        if self.n not in VALID_PATCH_COUNTS:
            raise ValueError(f"n must be one of {VALID_PATCH_COUNTS}, got {self.n}")

    @property
    def input_side(self) -> int:
        return 64 * self.n


class Discriminator(nn.Module):
    """Maps an image of side 64*n to an (B, n, n) inharmony grid."""

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        cfg = self.config
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.spatial = SpatialBranch(cfg.width_multiplier, cfg.tap_index)
            head_in = self.spatial.out_channels
            if cfg.use_freq_branch:
                self.freq = FrequencyBranch(self.spatial.tap_channels, cfg.width_multiplier)
                head_in += self.freq.out_features
            else:
                self.freq = None
            self.head = PatchHead(head_in, cfg.width_multiplier)
            self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m):
        # fan-in scaled so activations stay O(1) at any width multiplier
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=LEAKY_SLOPE, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)

    def _check_input(self, image: torch.Tensor):
        side = self.config.input_side
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(image.shape)}")
        if image.shape[-2] != side or image.shape[-1] != side:
            raise ValueError(
                f"input side must be 64*n = {side} for n={self.config.n}, "
                f"got {image.shape[-2]}x{image.shape[-1]}"
            )

    def spatial_features(self, image: torch.Tensor):
        self._check_input(image)
        return self.spatial(image)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        fds, fdm = self.spatial_features(image)
        n = self.config.n
        if self.freq is not None:
            patches = split_patches(fdm, n)
            b = patches.shape[0]
            flat = patches.reshape(b * n * n, *patches.shape[3:])
            desc = self.freq(flat).reshape(b, n, n, -1)
            fdf = assemble_freq_map(desc)
            head_in = torch.cat([fds, fdf], dim=1)
        else:
            head_in = fds
        return self.head(head_in).squeeze(1)
