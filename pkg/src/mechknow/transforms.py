"""Affine 2D mechanisms, parameter sampling and parameter normalization.

Images are numpy float32 arrays of shape (H, W, C) with intensities in [0, 1].
Conventions (fixed here, relied on by the test oracles):

* rotation center is the exact image center ((H-1)/2, (W-1)/2);
* a positive angle rotates image content counter-clockwise in display
  orientation (row index increasing downward);
* translation (tx, ty) is (horizontal, vertical) in pixels, positive
  meaning right/down;
* a joint transform scales first, then rotates, then translates, composed
  into a single map so the image is resampled exactly once (bilinear,
  zero fill outside the canvas).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ROTATION = "rotation"
SCALING = "scaling"
TRANSLATION = "translation"
JOINT = "joint"
MECHANISMS = (ROTATION, SCALING, TRANSLATION, JOINT)

ANGLE_RANGE = (-90.0, 90.0)
TRANSLATION_RANGE = (-5.0, 5.0)
SCALE_RANGE = (0.7, 1.3)

#: dimensionality of the normalized parameter vector per mechanism
PARAM_DIM = {ROTATION: 1, SCALING: 1, TRANSLATION: 2, JOINT: 4}

#: parameter names, in the order used by normalized vectors
PARAM_NAMES = {
    ROTATION: ("angle",),
    SCALING: ("scale",),
    TRANSLATION: ("tx", "ty"),
    JOINT: ("angle", "tx", "ty", "scale"),
}

_RANGE_TOL = 1e-9


class ConfigurationError(ValueError):
    """Raised for unknown mechanisms or inconsistent setups."""


@dataclass(frozen=True)
class TransformParams:
    """Parameters of a 2D affine mechanism; inactive fields sit at identity."""

    kind: str
    angle_deg: float = 0.0
    tx_px: float = 0.0
    ty_px: float = 0.0
    scale: float = 1.0

    def is_identity(self) -> bool:
        return (
            self.angle_deg == 0.0
            and self.tx_px == 0.0
            and self.ty_px == 0.0
            and self.scale == 1.0
        )


def identity_params(kind: str = JOINT) -> TransformParams:
    _check_kind(kind)
    return TransformParams(kind=kind)


def _check_kind(kind: str) -> None:
    if kind not in MECHANISMS:
        raise ConfigurationError(f"unknown mechanism {kind!r}; expected one of {MECHANISMS}")


def sample_transform_params(kind: str, rng: np.random.Generator) -> TransformParams:
    """Draw each active parameter uniformly from its range; inactive ones stay at identity."""
    _check_kind(kind)
    angle, tx, ty, scale = 0.0, 0.0, 0.0, 1.0
    if kind in (ROTATION, JOINT):
        angle = float(rng.uniform(*ANGLE_RANGE))
    if kind in (TRANSLATION, JOINT):
        tx = float(rng.uniform(*TRANSLATION_RANGE))
        ty = float(rng.uniform(*TRANSLATION_RANGE))
    if kind in (SCALING, JOINT):
        scale = float(rng.uniform(*SCALE_RANGE))
    return TransformParams(kind=kind, angle_deg=angle, tx_px=tx, ty_px=ty, scale=scale)


def _norm_one(value: float, lo: float, hi: float, name: str, strict: bool) -> float:
    if strict and not (lo - _RANGE_TOL <= value <= hi + _RANGE_TOL):
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
    return (2.0 * value - (lo + hi)) / (hi - lo)


def _denorm_one(v: float, lo: float, hi: float, name: str, strict: bool) -> float:
    if strict and not (-1.0 - _RANGE_TOL <= v <= 1.0 + _RANGE_TOL):
        raise ValueError(f"normalized {name}={v} outside [-1, 1]")
    return 0.5 * (v * (hi - lo) + (lo + hi))


def normalize_params(p: TransformParams, strict: bool = True) -> np.ndarray:
    """Map active parameters onto [-1, 1] per their ranges; returns shape (d,)."""
    _check_kind(p.kind)
    comp = {
        "angle": _norm_one(p.angle_deg, *ANGLE_RANGE, "angle_deg", strict),
        "tx": _norm_one(p.tx_px, *TRANSLATION_RANGE, "tx_px", strict),
        "ty": _norm_one(p.ty_px, *TRANSLATION_RANGE, "ty_px", strict),
        "scale": _norm_one(p.scale, *SCALE_RANGE, "scale", strict),
    }
    return np.array([comp[n] for n in PARAM_NAMES[p.kind]], dtype=np.float64)


def denormalize_params(values, kind: str, strict: bool = True) -> TransformParams:
    """Inverse of :func:`normalize_params`.

    ``strict=False`` admits values outside [-1, 1]; estimator outputs are not
    clamped, and restoration deliberately probes out-of-range targets.
    """
    _check_kind(kind)
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    names = PARAM_NAMES[kind]
    if v.shape[0] != len(names):
        raise ValueError(f"expected {len(names)} values for {kind}, got {v.shape[0]}")
    fields = {"angle_deg": 0.0, "tx_px": 0.0, "ty_px": 0.0, "scale": 1.0}
    ranges = {"angle": ANGLE_RANGE, "tx": TRANSLATION_RANGE, "ty": TRANSLATION_RANGE, "scale": SCALE_RANGE}
    field_of = {"angle": "angle_deg", "tx": "tx_px", "ty": "ty_px", "scale": "scale"}
    for name, val in zip(names, v):
        lo, hi = ranges[name]
        fields[field_of[name]] = _denorm_one(float(val), lo, hi, name, strict)
    return TransformParams(kind=kind, **fields)


def _affine_coeffs(p: TransformParams):
    """Inverse-map coefficients: source = M @ (dest - center - t) + center."""
    th = math.radians(p.angle_deg)
    c, s = math.cos(th), math.sin(th)
    inv_scale = 1.0 / p.scale
    # forward on (row, col) offsets: R = [[c, -s], [s, c]] (content CCW in display),
    # then + (ty, tx); inverse composes R(-theta) and 1/scale.
    m00 = inv_scale * c
    m01 = inv_scale * s
    m10 = -inv_scale * s
    m11 = inv_scale * c
    return m00, m01, m10, m11, p.ty_px, p.tx_px


def _bilinear_gather(img: np.ndarray, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
    """Sample img (H, W, C) at float coordinates (rr, cc); zero outside."""
    h, w = img.shape[:2]
    r0 = np.floor(rr)
    c0 = np.floor(cc)
    fr = rr - r0
    fc = cc - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)

    out = None
    for dr, dc, wgt in (
        (0, 0, (1.0 - fr) * (1.0 - fc)),
        (0, 1, (1.0 - fr) * fc),
        (1, 0, fr * (1.0 - fc)),
        (1, 1, fr * fc),
    ):
        ri = r0 + dr
        ci = c0 + dc
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = img[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
        w_eff = np.where(valid, wgt, 0.0)[..., None]
        term = w_eff * vals
        out = term if out is None else out + term
    return out


def apply_affine(x: np.ndarray, p: TransformParams) -> np.ndarray:
    """Apply the composed affine map about the image center, bilinear, zero fill.

    Total on any (H, W, C) float image; parameter ranges are not enforced so
    restoration experiments may probe beyond them.
    """
    if x.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {x.shape}")
    h, w = x.shape[:2]
    cr, cc_ = (h - 1) / 2.0, (w - 1) / 2.0
    m00, m01, m10, m11, ty, tx = _affine_coeffs(p)

    rows = np.arange(h, dtype=np.float64)[:, None] - cr - ty
    cols = np.arange(w, dtype=np.float64)[None, :] - cc_ - tx
    src_r = m00 * rows + m01 * cols + cr
    src_c = m10 * rows + m11 * cols + cc_
    out = _bilinear_gather(x.astype(np.float64, copy=False), src_r, src_c)
    return np.ascontiguousarray(out, dtype=np.float32)


def apply_affine_batch(xs: np.ndarray, params: list[TransformParams]) -> np.ndarray:
    """Warp a (B, H, W, C) stack, one parameter set per image, in one pass."""
    if xs.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) stack, got shape {xs.shape}")
    b, h, w, _ = xs.shape
    if len(params) != b:
        raise ValueError(f"{len(params)} parameter sets for {b} images")
    cr, cc_ = (h - 1) / 2.0, (w - 1) / 2.0
    coeff = np.array([_affine_coeffs(p) for p in params], dtype=np.float64)
    m00, m01, m10, m11 = (coeff[:, i].reshape(b, 1, 1) for i in range(4))
    ty, tx = coeff[:, 4].reshape(b, 1, 1), coeff[:, 5].reshape(b, 1, 1)

    rows = np.arange(h, dtype=np.float64).reshape(1, h, 1) - cr - ty
    cols = np.arange(w, dtype=np.float64).reshape(1, 1, w) - cc_ - tx
    src_r = m00 * rows + m01 * cols + cr
    src_c = m10 * rows + m11 * cols + cc_

    r0 = np.floor(src_r)
    c0 = np.floor(src_c)
    fr = src_r - r0
    fc = src_c - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    bi = np.arange(b).reshape(b, 1, 1)

    imgs = xs.astype(np.float64, copy=False)
    out = None
    for dr, dc, wgt in (
        (0, 0, (1.0 - fr) * (1.0 - fc)),
        (0, 1, (1.0 - fr) * fc),
        (1, 0, fr * (1.0 - fc)),
        (1, 1, fr * fc),
    ):
        ri = r0 + dr
        ci = c0 + dc
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = imgs[bi, np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
        term = np.where(valid, wgt, 0.0)[..., None] * vals
        out = term if out is None else out + term
    return np.ascontiguousarray(out, dtype=np.float32)


def identity_mechanism(
    x: np.ndarray,
    x_alt: np.ndarray,
    theta_hat: np.ndarray,
    label: int,
    kind: str = ROTATION,
) -> np.ndarray:
    """Same-or-other mechanism: transform x when label=1, x_alt when label=0.

    theta_hat is a normalized parameter vector, typically an estimator output
    (not clamped to [-1, 1]).
    """
    if label not in (0, 1):
        raise ValueError(f"identity label must be 0 or 1, got {label!r}")
    if label == 0 and x_alt.shape == x.shape and np.array_equal(x_alt, x):
        raise ValueError("label=0 requires a source distinct from x")
    p = denormalize_params(theta_hat, kind, strict=False)
    return apply_affine(x if label == 1 else x_alt, p)
