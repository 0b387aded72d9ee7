"""Gridded precipitation fields and the geometric transforms the forecaster relies on.

A :class:`Raster` is a single 2-D field (rain rate in mm/h or reflectivity in
dBZ) on a regular grid; a :class:`SourceStack` is a time/channel stack of such
fields.  Pixels without ground truth carry the sentinel value ``-1``.

Coordinate convention: origin at the top-left corner, x to the right, y
downward, both in km.  All transforms are pure functions over their inputs.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

SENTINEL = -1.0

KINDS = ("rate", "dbz")


class DimensionError(ValueError):
    """Raised when grid dimensions are incompatible with a requested transform."""


class AlignmentError(ValueError):
    """Raised when a pad/crop target cannot be split symmetrically."""


def _check_values(values: np.ndarray, kind: str) -> None:
    if values.ndim < 2 or values.shape[-1] < 1 or values.shape[-2] < 1:
        raise DimensionError(f"grid must be at least 1x1, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("grid contains non-finite values")
    if kind == "rate":
        bad = (values < 0) & (values != SENTINEL)
        if np.any(bad):
            raise ValueError("rate grid has negative values other than the sentinel")
    elif kind == "dbz":
        if np.any((values < -1) | (values > 64)):
            raise ValueError("dBZ grid outside [-1, 64]")
    else:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")


@dataclass(frozen=True)
class Raster:
    """One georeferenced 2-D field.  Treat instances as immutable.

    values: (H, W) float array; ``-1`` marks missing ground truth.
    res_km: grid spacing in km/pixel (> 0).
    origin_km: (x, y) of the top-left corner in the shared frame, km.
    kind: "rate" (mm/h) or "dbz".
    """

    values: np.ndarray
    res_km: float
    origin_km: tuple[float, float] = (0.0, 0.0)
    kind: str = "rate"

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2:
            raise DimensionError(f"Raster values must be 2-D, got {self.values.ndim}-D")
        if self.res_km <= 0:
            raise ValueError("res_km must be positive")
        _check_values(self.values, self.kind)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        return self.values != SENTINEL

    @property
    def extent_km(self) -> tuple[float, float]:
        h, w = self.values.shape
        return (w * self.res_km, h * self.res_km)


@dataclass(frozen=True)
class SourceStack:
    """A (T, C, H, W) stack of fields sharing one grid.

    timesteps_min are offsets in minutes relative to the forecast origin and
    must be strictly increasing, one per time slice.
    """

    data: np.ndarray
    res_km: float
    origin_km: tuple[float, float] = (0.0, 0.0)
    timesteps_min: tuple[float, ...] = ()
    kind: str = "rate"

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))
        object.__setattr__(self, "timesteps_min", tuple(self.timesteps_min))
        if self.data.ndim != 4:
            raise DimensionError(f"SourceStack data must be (T, C, H, W), got {self.data.shape}")
        if self.res_km <= 0:
            raise ValueError("res_km must be positive")
        if len(self.timesteps_min) != self.data.shape[0]:
            raise ValueError("timesteps_min length must match the time dimension")
        steps = np.asarray(self.timesteps_min)
        if len(steps) > 1 and not np.all(np.diff(steps) > 0):
            raise ValueError("timesteps_min must be strictly increasing")
        _check_values(self.data, self.kind)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def extent_km(self) -> tuple[float, float]:
        h, w = self.data.shape[-2:]
        return (w * self.res_km, h * self.res_km)


# ---------------------------------------------------------------------------
# resampling


def downsample_mean(r: Raster, factor: int) -> Raster:
    """Block-average by an integer factor, ignoring sentinel pixels.

    Each output pixel is the mean of the valid pixels in its factor x factor
    block; a block with no valid pixels stays sentinel.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = r.values.shape
    if h % factor or w % factor:
        raise DimensionError(f"factor {factor} does not divide {h}x{w}")
    if factor == 1:
        return r
    v = r.values.reshape(h // factor, factor, w // factor, factor)
    valid = v != SENTINEL
    counts = valid.sum(axis=(1, 3))
    sums = np.where(valid, v, 0.0).sum(axis=(1, 3))
    with np.errstate(invalid="ignore"):
        out = np.where(counts > 0, sums / np.maximum(counts, 1), SENTINEL)
    return Raster(out, r.res_km * factor, r.origin_km, r.kind)


def upsample_bilinear(r: Raster, factor: int) -> Raster:
    """Bilinear upsampling with half-pixel-center alignment and edge clamping.

    The input must not contain sentinels (fill or mask first).
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if np.any(r.values == SENTINEL):
        raise ValueError("upsample_bilinear input contains sentinel pixels")
    if factor == 1:
        return r
    h, w = r.values.shape

    def axis_coords(n):
        src = (np.arange(n * factor, dtype=np.float64) + 0.5) / factor - 0.5
        src = np.clip(src, 0.0, n - 1.0)
        i0 = np.floor(src).astype(np.intp)
        i0 = np.minimum(i0, n - 1)
        frac = src - i0
        i1 = np.minimum(i0 + 1, n - 1)
        return i0, i1, frac

    y0, y1, fy = axis_coords(h)
    x0, x1, fx = axis_coords(w)
    v = r.values
    # lerp form keeps constants exact: a + f*(b - a)
    top = v[np.ix_(y0, x0)]
    top = top + fx[None, :] * (v[np.ix_(y0, x1)] - top)
    bot = v[np.ix_(y1, x0)]
    bot = bot + fx[None, :] * (v[np.ix_(y1, x1)] - bot)
    out = top + fy[:, None] * (bot - top)
    return Raster(out, r.res_km / factor, r.origin_km, r.kind)


# ---------------------------------------------------------------------------
# tensor rearrangements (no arithmetic)


def space_to_depth_array(x: np.ndarray, block: int) -> np.ndarray:
    """Rearrange (..., C, H, W) -> (..., C*block^2, H/block, W/block).

    Output channel c*block^2 + dy*block + dx holds phase (dy, dx) of input
    channel c.
    """
    block = int(block)
    if block < 1:
        raise ValueError("block must be >= 1")
    *lead, c, h, w = x.shape
    if h % block or w % block:
        raise DimensionError(f"block {block} does not divide {h}x{w}")
    if block == 1:
        return x.copy()
    x = x.reshape(*lead, c, h // block, block, w // block, block)
    # (..., c, H', by, W', bx) -> (..., c, by, bx, H', W')
    x = np.moveaxis(x, (-3, -1), (-4, -3))
    return np.ascontiguousarray(x.reshape(*lead, c * block * block, h // block, w // block))


def depth_to_space_array(x: np.ndarray, block: int) -> np.ndarray:
    """Inverse of :func:`space_to_depth_array`."""
    block = int(block)
    if block < 1:
        raise ValueError("block must be >= 1")
    *lead, cb, h, w = x.shape
    if cb % (block * block):
        raise DimensionError(f"channel count {cb} not divisible by block^2 = {block * block}")
    if block == 1:
        return x.copy()
    c = cb // (block * block)
    x = x.reshape(*lead, c, block, block, h, w)
    x = np.moveaxis(x, (-4, -3), (-3, -1))
    return np.ascontiguousarray(x.reshape(*lead, c, h * block, w * block))


def space_to_depth(s: SourceStack, block: int) -> SourceStack:
    """Space-to-depth on a stack; the grid becomes ``block`` times coarser."""
    out = space_to_depth_array(s.data, block)
    return replace(s, data=out, res_km=s.res_km * block)


def depth_to_space(s: SourceStack, block: int) -> SourceStack:
    out = depth_to_space_array(s.data, block)
    return replace(s, data=out, res_km=s.res_km / block)


def merge_time_channels(s: SourceStack) -> np.ndarray:
    """Fold time into channels: (T, C, H, W) -> (T*C, H, W), time-major."""
    t, c, h, w = s.data.shape
    return s.data.reshape(t * c, h, w)


def split_time_channels(x: np.ndarray, t_steps: int) -> np.ndarray:
    """Inverse of :func:`merge_time_channels`: (T*C, H, W) -> (T, C, H, W)."""
    tc, h, w = x.shape
    if tc % t_steps:
        raise DimensionError(f"{tc} channels not divisible into {t_steps} timesteps")
    return x.reshape(t_steps, tc // t_steps, h, w)


# ---------------------------------------------------------------------------
# geographic alignment


def align_center(s: SourceStack, target_extent_km: tuple[float, float]) -> SourceStack:
    """Pad with zeros / crop so the stack covers target_extent_km, centered.

    Padding and cropping are split equally on opposite sides; the physical
    coordinates of retained pixels are unchanged (origin_km is shifted to
    compensate).  Pad value is 0, not the sentinel: padding represents
    zero context, not missing ground truth.
    """
    t, c, h, w = s.data.shape
    tw_km, th_km = target_extent_km

    def target_px(extent, cur_px):
        px = extent / s.res_km
        px_i = int(round(px))
        if abs(px - px_i) > 1e-9:
            raise AlignmentError(f"target extent {extent} km is not a multiple of res {s.res_km} km")
        if (px_i - cur_px) % 2:
            raise AlignmentError(
                f"extent change {cur_px} -> {px_i} px cannot be split equally on both sides"
            )
        return px_i

    new_w = target_px(tw_km, w)
    new_h = target_px(th_km, h)
    dy = (new_h - h) // 2
    dx = (new_w - w) // 2
    out = s.data
    if dy > 0:
        out = np.pad(out, ((0, 0), (0, 0), (dy, dy), (0, 0)))
    elif dy < 0:
        out = out[:, :, -dy : h + dy, :]
    if dx > 0:
        out = np.pad(out, ((0, 0), (0, 0), (0, 0), (dx, dx)))
    elif dx < 0:
        out = out[:, :, :, -dx : w + dx]
    ox, oy = s.origin_km
    origin = (ox - dx * s.res_km, oy - dy * s.res_km)
    return replace(s, data=np.ascontiguousarray(out), origin_km=origin)


# ---------------------------------------------------------------------------
# portable raster files: <base>.json header + <base>.f32 payload


def save_raster(base: str | Path, obj: Raster | SourceStack) -> None:
    """Write a raster or single-channel stack as a JSON header + raw f32 payload."""
    base = Path(base)
    if isinstance(obj, Raster):
        h, w = obj.values.shape
        header = {
            "h": h,
            "w": w,
            "res_km": obj.res_km,
            "origin_km": list(obj.origin_km),
            "kind": obj.kind,
        }
        payload = obj.values
    else:
        t, c, h, w = obj.data.shape
        if c != 1:
            raise ValueError("raster files hold single-channel stacks")
        header = {
            "h": h,
            "w": w,
            "res_km": obj.res_km,
            "origin_km": list(obj.origin_km),
            "kind": obj.kind,
            "timesteps_min": list(obj.timesteps_min),
        }
        payload = obj.data
    base.with_suffix(".json").write_text(json.dumps(header, sort_keys=True) + "\n")
    base.with_suffix(".f32").write_bytes(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def load_raster(base: str | Path) -> Raster | SourceStack:
    """Read a raster file pair written by :func:`save_raster`."""
    base = Path(base)
    header = json.loads(base.with_suffix(".json").read_text())
    raw = np.frombuffer(base.with_suffix(".f32").read_bytes(), dtype="<f4").astype(np.float64)
    h, w = header["h"], header["w"]
    origin = tuple(header["origin_km"])
    if "timesteps_min" in header:
        steps = header["timesteps_min"]
        data = raw.reshape(len(steps), 1, h, w)
        return SourceStack(data, header["res_km"], origin, tuple(steps), header["kind"])
    return Raster(raw.reshape(h, w), header["res_km"], origin, header["kind"])
