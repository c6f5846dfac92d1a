"""Dual-domain painterly image harmonization toolkit.

Harmonizes a photographic object pasted into a painting by restyling it in
both the spatial domain (masked adaptive instance normalization) and the
frequency domain (residual learning on packed FFT features), trained against
a patch-level dual-domain discriminator. Also ships the composite dataset
builder, frequency-map visualization and a Bradley-Terry preference fitter.
"""

from . import btrank, data, discriminator, generator, losses, spectral, trainer

__version__ = "0.1.0"

__all__ = [
    "btrank",
    "data",
    "discriminator",
    "generator",
    "losses",
    "spectral",
    "trainer",
]
