"""Fourier-domain primitives shared by the generator, the discriminator and
the frequency-map visualization.

Conventions used everywhere in this package:

* arrays passed to the pure functions here are channel-last ``(h, w, c)``;
* the forward transform is unnormalized and the inverse carries the full
  ``1 / (h * w)`` factor (the "backward" convention of numpy and torch);
* the half spectrum keeps ``wf = w // 2 + 1`` columns along the width axis,
  i.e. the true non-redundant count including the Nyquist column for even
  widths, and remembers the original width so inversion is exact for odd
  widths too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# Largest side accepted by the direct-summation reference transform.
NAIVE_DFT_MAX_SIDE = 32

# Stabilizer added to FFT magnitudes before taking the log.
LOG_MAG_EPS = 1e-8

# Rec. 601 luma weights used to collapse RGB to one channel for visualization.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class HalfSpectrum:
    """Non-redundant half of the 2-D DFT of a real ``(h, w, c)`` map."""

    real_part: np.ndarray  # (h, wf, c)
    imag_part: np.ndarray  # (h, wf, c)
    original_width: int

    def __post_init__(self):
        if self.real_part.shape != self.imag_part.shape:
            raise ValueError(
                f"real/imag shape mismatch: {self.real_part.shape} vs {self.imag_part.shape}"
            )
        if self.real_part.ndim != 3:
            raise ValueError(f"expected (h, wf, c) parts, got shape {self.real_part.shape}")
        wf = self.original_width // 2 + 1
        if self.real_part.shape[1] != wf:
            raise ValueError(
                f"half-spectrum width {self.real_part.shape[1]} inconsistent with "
                f"original_width {self.original_width} (expected {wf})"
            )

    @property
    def shape(self):
        return self.real_part.shape

    def to_complex(self) -> np.ndarray:
        return self.real_part + 1j * self.imag_part


@dataclass
class PackedSpectrum:
    """Half spectrum with real and imaginary parts concatenated channel-wise.

    The first ``c`` channels are the real parts, the last ``c`` the imaginary
    parts, so the packed map has an even channel count ``2c``.
    """

    data: np.ndarray  # (h, wf, 2c)
    original_width: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"expected (h, wf, 2c) data, got shape {self.data.shape}")
        if self.data.shape[2] % 2 != 0:
            raise ValueError(f"packed channel count must be even, got {self.data.shape[2]}")


@dataclass
class FrequencyMap:
    """Centered log-magnitude spectrum of an image, for visualization."""

    data: np.ndarray  # (H, W)

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"expected (H, W) map, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("frequency map contains non-finite values")


def _check_feature(feature: np.ndarray, name: str = "feature") -> np.ndarray:
    feature = np.asarray(feature)
    if feature.ndim != 3:
        raise ValueError(f"{name} must be (h, w, c), got shape {feature.shape}")
    if feature.shape[0] < 1 or feature.shape[1] < 1:
        raise ValueError(f"{name} must have h >= 1 and w >= 1, got shape {feature.shape}")
    if not np.all(np.isfinite(feature)):
        raise ValueError(f"{name} contains non-finite values")
    return feature


def rfft2(feature: np.ndarray) -> HalfSpectrum:
    """Forward real 2-D DFT of an ``(h, w, c)`` map, per channel.

    Returns the non-redundant half along the width axis; bin ``(u, v)`` of
    channel ``k`` is ``sum_xy f[x, y, k] * exp(-2j*pi*(u*x/h + v*y/w))``.
    """
    feature = _check_feature(feature)
    spec = np.fft.rfft2(feature, axes=(0, 1))
    return HalfSpectrum(
        real_part=np.ascontiguousarray(spec.real),
        imag_part=np.ascontiguousarray(spec.imag),
        original_width=feature.shape[1],
    )


def irfft2(spectrum: HalfSpectrum) -> np.ndarray:
    """Inverse of :func:`rfft2`; output width equals ``original_width``."""
    if not isinstance(spectrum, HalfSpectrum):
        raise ValueError(f"expected a HalfSpectrum, got {type(spectrum).__name__}")
    w = spectrum.original_width
    if w < 1:
        raise ValueError(f"original_width must be >= 1, got {w}")
    return np.fft.irfft2(spectrum.to_complex(), s=(spectrum.shape[0], w), axes=(0, 1))


def pack(spectrum: HalfSpectrum) -> PackedSpectrum:
    """Concatenate real and imaginary parts channel-wise: ``(h, wf, 2c)``."""
    data = np.concatenate([spectrum.real_part, spectrum.imag_part], axis=2)
    return PackedSpectrum(data=data, original_width=spectrum.original_width)


def unpack(packed: PackedSpectrum) -> HalfSpectrum:
    """Split a packed ``(h, wf, 2c)`` map back into a half spectrum."""
    c2 = packed.data.shape[2]
    if c2 % 2 != 0:
        raise ValueError(f"cannot unpack odd channel count {c2}")
    c = c2 // 2
    return HalfSpectrum(
        real_part=np.ascontiguousarray(packed.data[:, :, :c]),
        imag_part=np.ascontiguousarray(packed.data[:, :, c:]),
        original_width=packed.original_width,
    )


def full_fft2_packed(feature: np.ndarray) -> np.ndarray:
    """Full (unhalved) 2-D DFT of a square patch, real/imag concatenated.

    Keeps both positive and negative frequency terms so the output spatial
    size equals the input spatial size: ``(p, p, c) -> (p, p, 2c)``.
    """
    feature = _check_feature(feature, "patch")
    if feature.shape[0] != feature.shape[1]:
        raise ValueError(f"patch must be square, got {feature.shape[0]}x{feature.shape[1]}")
    spec = np.fft.fft2(feature, axes=(0, 1))
    return np.concatenate([spec.real, spec.imag], axis=2)


def naive_dft2(feature: np.ndarray) -> HalfSpectrum:
    """Direct-summation 2-D DFT, the reference for the fast transforms.

    Evaluates every bin as an explicit sum over all input positions, so it is
    O(h^2 * w^2) and only accepts small maps.
    """
    feature = _check_feature(feature)
    h, w, c = feature.shape
    if h > NAIVE_DFT_MAX_SIDE or w > NAIVE_DFT_MAX_SIDE:
        raise ValueError(
            f"naive_dft2 accepts at most {NAIVE_DFT_MAX_SIDE}x{NAIVE_DFT_MAX_SIDE} maps, got {h}x{w}"
        )
    wf = w // 2 + 1
    xs = np.arange(h).reshape(h, 1, 1)
    ys = np.arange(w).reshape(1, w, 1)
    out = np.zeros((h, wf, c), dtype=np.complex128)
    for u in range(h):
        for v in range(wf):
            phase = np.exp(-2j * np.pi * (u * xs / h + v * ys / w))
            out[u, v, :] = np.sum(feature * phase, axis=(0, 1))
    return HalfSpectrum(
        real_part=np.ascontiguousarray(out.real),
        imag_part=np.ascontiguousarray(out.imag),
        original_width=w,
    )


def half_to_full(spectrum: HalfSpectrum) -> np.ndarray:
    """Expand a half spectrum to the full complex ``(h, w, c)`` DFT via
    conjugate symmetry ``X[u, v] = conj(X[(h-u) % h, w-v])``."""
    h, wf, c = spectrum.shape
    w = spectrum.original_width
    half = spectrum.to_complex()
    full = np.zeros((h, w, c), dtype=np.complex128)
    full[:, :wf, :] = half
    for v in range(wf, w):
        src = w - v
        full[:, v, :] = np.conj(half[(h - np.arange(h)) % h, src, :])
    return full


def log_magnitude_map(image: np.ndarray) -> FrequencyMap:
    """Centered log-magnitude spectrum of an image's luminance channel.

    ``log(1e-8 + |FFT|)`` with the zero-frequency bin shifted to the center.
    Accepts ``(H, W, 3)`` or single-channel ``(H, W)`` / ``(H, W, 1)`` input.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 3:
        r, g, b = LUMA_WEIGHTS
        luma = r * image[:, :, 0] + g * image[:, :, 1] + b * image[:, :, 2]
    elif image.ndim == 3 and image.shape[2] == 1:
        luma = image[:, :, 0]
    elif image.ndim == 2:
        luma = image
    else:
        raise ValueError(f"expected (H, W, 3), (H, W, 1) or (H, W) image, got {image.shape}")
    if not np.all(np.isfinite(luma)):
        raise ValueError("image contains non-finite values")
    spec = np.fft.fftshift(np.fft.fft2(luma))
    return FrequencyMap(data=np.log(LOG_MAG_EPS + np.abs(spec)))


def frequency_map_to_u8(fmap: FrequencyMap) -> np.ndarray:
    """Min-max normalize a frequency map to an 8-bit grayscale image."""
    data = fmap.data
    lo, hi = float(data.min()), float(data.max())
    if hi - lo < 1e-12:
        return np.zeros(data.shape, dtype=np.uint8)
    return np.round((data - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_frequency_map_png(fmap: FrequencyMap, path) -> None:
    from PIL import Image

    Image.fromarray(frequency_map_to_u8(fmap), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Batched torch variants used inside network layers. Same conventions as the
# numpy functions above (unnormalized forward, 1/(h*w) inverse, real parts in
# the first half of the channel axis), but channel-first (B, C, H, W) layout.
# ---------------------------------------------------------------------------


def rfft2_packed(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) real -> (B, 2C, H, W//2+1) packed half spectrum."""
    spec = torch.fft.rfft2(x, dim=(-2, -1), norm="backward")
    return torch.cat([spec.real, spec.imag], dim=1)


def irfft2_packed(z: torch.Tensor, width: int) -> torch.Tensor:
    """(B, 2C, H, Wf) packed half spectrum -> (B, C, H, width) real map."""
    c2 = z.shape[1]
    if c2 % 2 != 0:
        raise ValueError(f"packed channel count must be even, got {c2}")
    c = c2 // 2
    spec = torch.complex(z[:, :c], z[:, c:])
    return torch.fft.irfft2(spec, s=(z.shape[-2], width), dim=(-2, -1), norm="backward")


def fft2_packed(x: torch.Tensor) -> torch.Tensor:
    """(B, C, P, P) real -> (B, 2C, P, P) full spectrum, real/imag stacked."""
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"expected square patches, got {x.shape[-2]}x{x.shape[-1]}")
    spec = torch.fft.fft2(x, dim=(-2, -1), norm="backward")
    return torch.cat([spec.real, spec.imag], dim=1)
