"""Stochastic image augmentation.

Each presentation of a sample draws an independent gate per transform
(rescale, translate, rotate, intensity, blur) so different branches see
different versions of the same face. Geometry is composed into a single
inverse-mapped bilinear warp with edge replication; order is
scale -> rotate -> translate -> intensity -> blur.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import backend


@dataclass
class AugmentConfig:
    rescale_range: float = 0.10         # scale factor in 1 +- this
    translate_range: float = 0.10       # shift up to this fraction of the side
    rotate_range: float = 15.0          # degrees
    intensity_scale: tuple = (0.8, 1.2)
    intensity_offset: float = 0.1
    blur_sigma: tuple = (0.0, 1.5)
    per_transform_probability: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.per_transform_probability <= 1.0:
            raise ValueError("per_transform_probability must be in [0, 1]")
        if self.rescale_range < 0 or self.translate_range < 0 or self.rotate_range < 0:
            raise ValueError("augmentation ranges must be non-negative")


def apply_affine(image, scale=1.0, tx=0.0, ty=0.0, angle=0.0):
    """Scale-rotate-translate warp of a (C, H, W) image about its center.

    *tx*/*ty* shift the content right/down in pixels; a positive *angle*
    (degrees) rotates the content clockwise on screen; *scale* > 1 zooms
    in. Bilinear sampling with edge-replicate fill; output shape equals
    input shape.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    c, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = math.radians(angle)
    cos_t, sin_t = math.cos(rad), math.sin(rad)
    # inverse map: undo translation, rotation, then scale
    # source_col = ( cos*(col-cx-tx) + sin*(row-cy-ty))/scale + cx
    # source_row = (-sin*(col-cx-tx) + cos*(row-cy-ty))/scale + cy
    m00 = cos_t / scale                       # d(source_row)/d(row)
    m01 = -sin_t / scale                      # d(source_row)/d(col)
    m02 = (-sin_t * (-cx - tx) + cos_t * (-cy - ty)) / scale + cy
    m10 = sin_t / scale
    m11 = cos_t / scale
    m12 = (cos_t * (-cx - tx) + sin_t * (-cy - ty)) / scale + cx
    out = backend.bilinear_warp(np.ascontiguousarray(image), m00, m01, m02, m10, m11, m12)
    return out


def gaussian_kernel(sigma):
    """Normalized 1-D sampled Gaussian with radius ceil(3*sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image, sigma):
    """Separable Gaussian blur of a (C, H, W) image, edge-replicate borders."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return image.copy()
    k = gaussian_kernel(sigma).astype(image.dtype)
    r = (len(k) - 1) // 2
    _, h, w = image.shape
    padded = np.pad(image, ((0, 0), (r, r), (0, 0)), mode="edge")
    out = np.zeros_like(image)
    for i, kv in enumerate(k):
        out += kv * padded[:, i:i + h, :]
    padded = np.pad(out, ((0, 0), (0, 0), (r, r)), mode="edge")
    out = np.zeros_like(image)
    for i, kv in enumerate(k):
        out += kv * padded[:, :, i:i + w]
    return out


def random_augment(image, config: AugmentConfig, rng):
    """Randomly transformed copy of a (C, H, W) image in [0, 1].

    Every magnitude is drawn from *rng* whether or not its gate fires, so
    the random stream advances identically regardless of outcomes;
    (seed, config, image) fully determines the result.
    """
    _, h, w = image.shape
    gates = rng.random(5) < config.per_transform_probability
    scale = 1.0 + rng.uniform(-config.rescale_range, config.rescale_range)
    angle = rng.uniform(-config.rotate_range, config.rotate_range)
    tx = rng.uniform(-config.translate_range, config.translate_range) * w
    ty = rng.uniform(-config.translate_range, config.translate_range) * h
    gain = rng.uniform(*config.intensity_scale)
    offset = rng.uniform(-config.intensity_offset, config.intensity_offset)
    sigma = rng.uniform(*config.blur_sigma)

    out = image
    g_scale, g_trans, g_rot, g_int, g_blur = gates
    if g_scale or g_trans or g_rot:
        out = apply_affine(
            out,
            scale=scale if g_scale else 1.0,
            tx=tx if g_trans else 0.0,
            ty=ty if g_trans else 0.0,
            angle=angle if g_rot else 0.0,
        )
    if g_int:
        out = out * gain + offset
    if g_blur and sigma > 0:
        out = gaussian_blur(out, sigma)
    return np.clip(out, 0.0, 1.0)
