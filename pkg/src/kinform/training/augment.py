"""Joint random photometric and geometric augmentation of face crops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAMMA_RANGE = (0.75, 1.33)
SCALES = (0.5, 1.0, 2.0)
JITTER = 2


@dataclass(frozen=True)
class AugmentParams:
    gamma: float = 1.0
    scale: float = 1.0
    flip: bool = False
    dx: int = 0
    dy: int = 0


def draw_params(rng: np.random.Generator, gamma=True, scale=True, flip=True, jitter=True) -> AugmentParams:
    # gamma is log-uniform so the range is symmetric around 1
    g = float(np.exp(rng.uniform(np.log(GAMMA_RANGE[0]), np.log(GAMMA_RANGE[1])))) if gamma else 1.0
    s = float(SCALES[rng.integers(len(SCALES))]) if scale else 1.0
    f = bool(rng.random() < 0.5) if flip else False
    dx, dy = (int(v) for v in rng.integers(-JITTER, JITTER + 1, size=2)) if jitter else (0, 0)
    return AugmentParams(g, s, f, dx, dy)


def source_coords(size: int, scale: float, shift: int) -> np.ndarray:
    """Source index for each output index along one axis (-1 where out of range)."""
    centre = (size - 1) / 2.0
    out = np.arange(size)
    src = np.floor((out - shift - centre) / scale + centre + 0.5).astype(int)
    src[(src < 0) | (src >= size)] = -1
    return src


def apply_augmentation(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Gamma, zoom about the centre (crop or zero-pad), flip, then integer shift."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    out = img
    if params.gamma != 1.0:
        out = np.clip(255.0 * (out.astype(np.float64) / 255.0) ** params.gamma + 0.5, 0, 255).astype(np.uint8)
    if params.flip:
        out = out[:, ::-1]
    if params.scale != 1.0 or params.dx or params.dy:
        ys = source_coords(h, params.scale, params.dy)
        xs = source_coords(w, params.scale, params.dx)
        res = np.zeros_like(out)
        vy, vx = ys >= 0, xs >= 0
        res[np.ix_(vy, vx)] = out[np.ix_(ys[vy], xs[vx])]
        out = res
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, rng: np.random.Generator, **toggles) -> np.ndarray:
    return apply_augmentation(image, draw_params(rng, **toggles))
