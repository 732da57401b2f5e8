"""Frequency decomposition of images into low- and high-frequency bands.

The low-frequency band is an edge-preserving guided-filter smoothing of the
image (each channel guiding itself); the high-frequency band is the signed
residual, so the two bands always sum back to the input exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError

DEFAULT_RADIUS = 8
DEFAULT_EPS = 1e-3


@dataclass
class Image:
    """A (3, H, W) float64 image with values in [0, 1] plus its modality tag."""

    data: np.ndarray
    modality: str = "visible"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ContractError(f"Image data must be (3, H, W), got {self.data.shape}")

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class FrequencyPair:
    """Low- and high-frequency bands of one image; lf + hf == original."""

    lf: np.ndarray
    hf: np.ndarray
    modality: str = "visible"


def _window_sum(x: np.ndarray, radius: int) -> np.ndarray:
    """Sum over (2r+1)^2 windows, truncated at borders, via an integral image."""
    h, w = x.shape
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    y0 = np.clip(np.arange(h) - radius, 0, h)
    y1 = np.clip(np.arange(h) + radius + 1, 0, h)
    x0 = np.clip(np.arange(w) - radius, 0, w)
    x1 = np.clip(np.arange(w) + radius + 1, 0, w)
    return (
        ii[np.ix_(y1, x1)] - ii[np.ix_(y0, x1)] - ii[np.ix_(y1, x0)] + ii[np.ix_(y0, x0)]
    )


def box_filter(x: np.ndarray, radius: int) -> np.ndarray:
    """Mean over (2r+1)^2 windows, normalized by the true in-bounds count."""
    if radius < 1:
        raise ContractError(f"box_filter radius must be >= 1, got {radius}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"box_filter expects a 2-D array, got {x.shape}")
    h, w = x.shape
    ny = np.clip(np.arange(h) + radius + 1, 0, h) - np.clip(np.arange(h) - radius, 0, h)
    nx = np.clip(np.arange(w) + radius + 1, 0, w) - np.clip(np.arange(w) - radius, 0, w)
    return _window_sum(x, radius) / (ny[:, None] * nx[None, :])


def guided_filter(
    guide: np.ndarray, src: np.ndarray, radius: int = DEFAULT_RADIUS, eps: float = DEFAULT_EPS
) -> np.ndarray:
    """Edge-preserving smoothing of ``src`` steered by local statistics of ``guide``.

    Within each window the output is the best local affine map of the guide
    onto the source, ridge-regularized by ``eps``; overlapping estimates are
    averaged.  Large ``eps`` collapses the affine gain toward zero and the
    output toward a (twice) box-averaged source.
    """
    guide = np.asarray(guide, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    if guide.shape != src.shape or guide.ndim != 2:
        raise ContractError(f"guide/src must be matching 2-D arrays, got {guide.shape}, {src.shape}")
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    mean_i = box_filter(guide, radius)
    mean_p = box_filter(src, radius)
    corr_ip = box_filter(guide * src, radius)
    corr_ii = box_filter(guide * guide, radius)
    cov_ip = corr_ip - mean_i * mean_p
    var_i = corr_ii - mean_i * mean_i
    a = cov_ip / (var_i + eps)
    b = mean_p - a * mean_i
    return box_filter(a, radius) * guide + box_filter(b, radius)


def decompose(
    img: Image, radius: int = DEFAULT_RADIUS, eps: float = DEFAULT_EPS
) -> FrequencyPair:
    """Split an image into guided-filter low frequencies and a signed residual."""
    data = img.data
    if data.min() < -1e-9 or data.max() > 1.0 + 1e-9:
        raise ContractError(
            f"image values must lie in [0, 1], got range [{data.min()}, {data.max()}]"
        )
    lf = np.stack([guided_filter(data[c], data[c], radius, eps) for c in range(3)])
    hf = data - lf
    return FrequencyPair(lf=lf, hf=hf, modality=img.modality)


def save_decomposition_debug(pair: FrequencyPair, out_dir, stem: str) -> list[Path]:
    """Write LF and HF bands as PNGs; HF is offset by 0.5 for display."""
    from .fileio import write_png

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lf_path = out_dir / f"{stem}_lf.png"
    hf_path = out_dir / f"{stem}_hf.png"
    write_png(lf_path, np.clip(pair.lf, 0.0, 1.0))
    write_png(hf_path, np.clip(pair.hf + 0.5, 0.0, 1.0))
    return [lf_path, hf_path]
