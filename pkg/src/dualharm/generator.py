"""Dual-domain generator: a frozen multi-scale encoder, per-level masked
AdaIN followed by a frequency-domain residual layer, a decoder with skip
connections, and a learned soft-mask blend with the input composite.

Network tensors are channel-first: images (B, 3, H, W) in [0, 1], masks
(B, 1, H, W) binary. Side lengths must be divisible by 8 (three pooling
stages); the network itself is fully convolutional and size-agnostic.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import spectral

# Per-channel constants applied when externally pretrained encoder weights
# expect canonically normalized inputs.
INPUT_MEAN = (0.485, 0.456, 0.406)
INPUT_STD = (0.229, 0.224, 0.225)

BASE_CHANNELS = (64, 128, 256, 512)

STAT_EPS = 1e-5


def scaled_channels(width_multiplier: float) -> tuple[int, ...]:
    if width_multiplier <= 0:
        raise ValueError(f"width_multiplier must be positive, got {width_multiplier}")
    return tuple(max(1, round(c * width_multiplier)) for c in BASE_CHANNELS)


def _check_spatial(image: torch.Tensor, what: str = "input") -> None:
    h, w = image.shape[-2:]
    if h % 8 != 0 or w % 8 != 0:
        raise ValueError(
            f"{what} side lengths must be divisible by 8 (three downsampling "
            f"stages), got {h}x{w}"
        )


def masked_mean_std(feature: torch.Tensor, mask: torch.Tensor, eps: float = STAT_EPS):
    """Per-channel mean and std over mask==1 positions.

    feature (B, C, H, W), mask (B, 1, H, W) binary -> two (B, C) tensors,
    std = sqrt(var + eps). An all-zero mask falls back to (mean 0, std 1)
    with a warning so downstream normalization degenerates gracefully.
    """
    if feature.shape[-2:] != mask.shape[-2:] or feature.shape[0] != mask.shape[0]:
        raise ValueError(f"feature {tuple(feature.shape)} and mask {tuple(mask.shape)} mismatch")
    count = mask.sum(dim=(2, 3))  # (B, 1)
    empty = count == 0
    if bool(empty.any()):
        warnings.warn(
            "masked_mean_std: empty mask, falling back to mean 0 / std 1",
            RuntimeWarning,
            stacklevel=2,
        )
    safe = count.clamp(min=1.0)
    mean = (feature * mask).sum(dim=(2, 3)) / safe
    var = (((feature - mean[:, :, None, None]) * mask) ** 2).sum(dim=(2, 3)) / safe
    std = torch.sqrt(var + eps)
    if bool(empty.any()):
        mean = torch.where(empty, torch.zeros_like(mean), mean)
        std = torch.where(empty, torch.ones_like(std), std)
    return mean, std


def adain(content_feat: torch.Tensor, style_feat: torch.Tensor, mask: torch.Tensor):
    """Masked adaptive instance normalization.

    Inside the mask, the content feature is renormalized from its foreground
    statistics to the whole-image statistics of the style feature; outside
    the mask the content feature passes through bit-exactly.
    """
    if content_feat.shape != style_feat.shape:
        raise ValueError(
            f"content {tuple(content_feat.shape)} and style {tuple(style_feat.shape)} differ"
        )
    if content_feat.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"mask {tuple(mask.shape)} does not match features {tuple(content_feat.shape)}"
        )
    fg_mean, fg_std = masked_mean_std(content_feat, mask)
    bg_mean, bg_std = masked_mean_std(style_feat, torch.ones_like(mask))
    normalized = (
        bg_std[:, :, None, None]
        * (content_feat - fg_mean[:, :, None, None])
        / fg_std[:, :, None, None]
        + bg_mean[:, :, None, None]
    )
    return torch.where(mask.bool(), normalized, content_feat)


def blend(raw_output: torch.Tensor, composite: torch.Tensor, soft_mask: torch.Tensor):
    """Soft composition: output where the mask is 1, composite where it is 0."""
    if raw_output.shape != composite.shape:
        raise ValueError(
            f"output {tuple(raw_output.shape)} and composite {tuple(composite.shape)} differ"
        )
    if soft_mask.shape[-2:] != raw_output.shape[-2:]:
        raise ValueError(
            f"soft mask {tuple(soft_mask.shape)} does not match images {tuple(raw_output.shape)}"
        )
    return raw_output * soft_mask + composite * (1.0 - soft_mask)


def mask_pyramid(mask: torch.Tensor, sizes) -> list[torch.Tensor]:
    """Downsample a full-resolution binary mask to each feature-map size by
    average pooling, re-binarized with the shared >= 0.5 rule."""
    out = []
    for h, w in sizes:
        pooled = F.adaptive_avg_pool2d(mask, (h, w))
        out.append((pooled >= 0.5).to(mask.dtype))
    return out


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class VggEncoder(nn.Module):
    """First four stages of a VGG-19-layout encoder, frozen.

    Stage outputs are the ReLU activations at full, 1/2, 1/4 and 1/8
    resolution with (64, 128, 256, 512) * width channels. Weights are either
    seeded random (kaiming, so feature magnitudes stay O(1) through depth)
    or loaded from a conventional flat checkpoint at width 1.
    """

    # feature indices after which each stage ends (relu outputs)
    _STAGE_SLICES = ((0, 4), (4, 11), (11, 18), (18, 31))

    def __init__(self, width_multiplier: float = 1.0, normalize_inputs: bool = False):
        super().__init__()
        c1, c2, c3, c4 = self.channels = scaled_channels(width_multiplier)
        pad = nn.ReflectionPad2d
        pool = lambda: nn.MaxPool2d(2, 2, ceil_mode=True)  # noqa: E731
        self.features = nn.Sequential(
            nn.Conv2d(3, 3, 1),
            pad(1), nn.Conv2d(3, c1, 3), nn.ReLU(inplace=True),        # relu1_1
            pad(1), nn.Conv2d(c1, c1, 3), nn.ReLU(inplace=True),
            pool(),
            pad(1), nn.Conv2d(c1, c2, 3), nn.ReLU(inplace=True),       # relu2_1
            pad(1), nn.Conv2d(c2, c2, 3), nn.ReLU(inplace=True),
            pool(),
            pad(1), nn.Conv2d(c2, c3, 3), nn.ReLU(inplace=True),       # relu3_1
            pad(1), nn.Conv2d(c3, c3, 3), nn.ReLU(inplace=True),
            pad(1), nn.Conv2d(c3, c3, 3), nn.ReLU(inplace=True),
            pad(1), nn.Conv2d(c3, c3, 3), nn.ReLU(inplace=True),
            pool(),
            pad(1), nn.Conv2d(c3, c4, 3), nn.ReLU(inplace=True),       # relu4_1
        )
        self.normalize_inputs = normalize_inputs
        for m in self.features:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        self.register_buffer("input_mean", torch.tensor(INPUT_MEAN).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(INPUT_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)

    def load_pretrained(self, path) -> None:
        """Load a flat sequential checkpoint (keys like '0.weight') into the
        encoder; only valid at width multiplier 1."""
        if self.channels != BASE_CHANNELS:
            raise ValueError("pretrained encoder weights require width multiplier 1")
        state = torch.load(path, map_location="cpu", weights_only=True)
        remapped = {f"features.{k}": v for k, v in state.items()}
        missing = [k for k in self.state_dict() if k not in remapped and k.startswith("features.")]
        if missing:
            raise ValueError(f"checkpoint is missing encoder keys, e.g. {missing[0]}")
        self.load_state_dict(remapped, strict=False)
        self.normalize_inputs = True
        self.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        _check_spatial(image, "encoder input")
        x = image
        if self.normalize_inputs:
            x = (x - self.input_mean) / self.input_std
        out = []
        for lo, hi in self._STAGE_SLICES:
            x = self.features[lo:hi](x)
            out.append(x)
        return out


class SpectralResidualBlock(nn.Module):
    """conv3x3 -> BN -> ReLU -> conv3x3 on a packed spectrum, added back."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        # start as an exact identity in the frequency domain
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, z):
        return z + self.conv2(F.relu(self.norm(self.conv1(z))))


class ResFFTLayer(nn.Module):
    """Harmonize a feature map in the frequency domain.

    Forward real FFT -> pack real/imag channel-wise -> residual block(s) ->
    unpack -> inverse FFT. With zero residual weights this is an identity up
    to FFT round-trip error.
    """

    def __init__(self, channels: int, num_blocks: int = 1):
        super().__init__()
        self.blocks = nn.ModuleList(SpectralResidualBlock(2 * channels) for _ in range(num_blocks))

    def forward(self, x):
        width = x.shape[-1]
        z = spectral.rfft2_packed(x)
        for block in self.blocks:
            z = block(z)
        return spectral.irfft2_packed(z, width=width)


class Decoder(nn.Module):
    """Mirror of the encoder: nearest 2x upsample + conv3x3 + ReLU per stage,
    concatenating the matching harmonized encoder level before each conv.
    Returns the output image and the last decoder feature map."""

    def __init__(self, channels):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.conv3 = nn.Conv2d(c4 + c3, c3, 3, padding=1)
        self.conv2 = nn.Conv2d(c3 + c2, c2, 3, padding=1)
        self.conv1 = nn.Conv2d(c2 + c1, c1, 3, padding=1)
        self.to_image = nn.Conv2d(c1, 3, 3, padding=1)

    @staticmethod
    def _up(x):
        return F.interpolate(x, scale_factor=2, mode="nearest")

    def forward(self, levels):
        if len(levels) != 4 or any(t is None for t in levels):
            raise ValueError(f"decoder needs all 4 pyramid levels, got {len(levels)}")
        f1, f2, f3, f4 = levels
        x = F.relu(self.conv3(torch.cat([self._up(f4), f3], dim=1)))
        x = F.relu(self.conv2(torch.cat([self._up(x), f2], dim=1)))
        feats = F.relu(self.conv1(torch.cat([self._up(x), f1], dim=1)))
        return self.to_image(feats), feats


class BlendHead(nn.Module):
    """Predict the soft blending mask from decoder features and the input
    mask. Bias starts at +2 so the generated image dominates early on."""

    def __init__(self, feature_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(feature_channels + 1, 1, 3, padding=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.constant_(self.conv.bias, 2.0)

    def forward(self, features, mask):
        if features.shape[-2:] != mask.shape[-2:]:
            features = F.interpolate(features, size=mask.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(self.conv(torch.cat([features, mask], dim=1)))


@dataclass
class GeneratorConfig:
    width_multiplier: float = 1.0
    use_resfft: bool = True
    resfft_blocks: int = 1
    seed: int = 0
    encoder_weights: str | None = None
    # None = auto: normalize exactly when external encoder weights are loaded
    normalize_inputs: bool | None = None


class Generator(nn.Module):
    """Full harmonization network; forward maps (composite, background, mask)
    to (harmonized image, soft mask)."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        cfg = self.config
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.encoder = VggEncoder(
                cfg.width_multiplier,
                normalize_inputs=bool(cfg.normalize_inputs),
            )
            if cfg.encoder_weights:
                self.encoder.load_pretrained(cfg.encoder_weights)
                if cfg.normalize_inputs is not None:
                    self.encoder.normalize_inputs = cfg.normalize_inputs
            channels = self.encoder.channels
            if cfg.use_resfft:
                self.freq_layers = nn.ModuleList(
                    ResFFTLayer(c, cfg.resfft_blocks) for c in channels
                )
            else:
                self.freq_layers = None
            self.decoder = Decoder(channels)
            self.blend_head = BlendHead(channels[0])
            # fan-in scaled init keeps decoder activations O(1) at any width
            for mod in self.decoder.modules():
                if isinstance(mod, nn.Conv2d):
                    nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
                    nn.init.zeros_(mod.bias)
            nn.init.xavier_normal_(self.decoder.to_image.weight)

    def encode(self, image: torch.Tensor) -> list[torch.Tensor]:
        return self.encoder(image)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(
        self,
        composite: torch.Tensor,
        background: torch.Tensor,
        mask: torch.Tensor,
        return_pyramids: bool = False,
    ):
        if composite.shape != background.shape:
            raise ValueError(
                f"composite {tuple(composite.shape)} and background "
                f"{tuple(background.shape)} differ"
            )
        if mask.shape[-2:] != composite.shape[-2:]:
            raise ValueError(
                f"mask {tuple(mask.shape)} does not match images {tuple(composite.shape)}"
            )
        _check_spatial(composite)
        comp_feats = self.encoder(composite)
        bg_feats = self.encoder(background)
        level_masks = mask_pyramid(mask, [f.shape[-2:] for f in comp_feats])
        levels = []
        for l in range(4):
            t = adain(comp_feats[l], bg_feats[l], level_masks[l])
            if self.freq_layers is not None:
                t = self.freq_layers[l](t)
            levels.append(t)
        raw, feats = self.decoder(levels)
        soft_mask = self.blend_head(feats, mask)
        harmonized = blend(raw, composite, soft_mask)
        if return_pyramids:
            return harmonized, soft_mask, (comp_feats, bg_feats, level_masks)
        return harmonized, soft_mask
