"""Grey-level input data: PGM rasters and analytic test profiles.

A field is the continuous stand-in for the pixel image: rasters are
interpolated bilinearly between pixel centers and extrapolated as constants
to the domain boundary, analytic profiles are evaluated in closed form.
Fields are immutable; evaluation is pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PgmParseError

ANALYTIC_LATTICE = 512  # per-axis sampling resolution for analytic fields


@dataclass(frozen=True)
class GradStats:
    """Extremes of |grad g| over a sampling lattice."""
    grad_max: float
    grad_min: float
    resolution: tuple


class ImageField:
    """Common interface: dim, domain_box, eval(points), eval_grad(points)."""

    dim: int
    domain_box: tuple
    noise_amplitude: float = 0.0
    rng_seed: int | None = None

    def eval(self, points):
        raise NotImplementedError

    def eval_grad(self, points):
        raise NotImplementedError

    def _as_points(self, points):
        pts = np.asarray(points, dtype=float)
        scalar = pts.ndim <= 1
        return np.atleast_2d(pts).reshape(-1, self.dim), scalar


class RasterField(ImageField):
    """Pixel grid mapped onto a box, linear/bilinear between pixel centers.

    2D values are stored rows x cols with row 0 at the top of the box
    (image convention); 1D values run left to right.
    """

    def __init__(self, values, domain_box=None, *, noise_amplitude=0.0,
                 rng_seed=None):
        values = np.array(values, dtype=float)  # private copy
        if values.ndim == 2 and 1 in values.shape:
            values = values.ravel()
        self.values = values
        self.values.flags.writeable = False
        self.dim = values.ndim
        if self.dim not in (1, 2):
            raise ValueError("raster must be 1D or 2D")
        if domain_box is None:
            domain_box = ((0.0, 1.0),) * self.dim
        self.domain_box = tuple((float(lo), float(hi)) for lo, hi in domain_box)
        self.noise_amplitude = float(noise_amplitude)
        self.rng_seed = rng_seed

    # pixel-center coordinate along an axis: lo + (index + 0.5) * h
    def _axis_coord(self, points):
        """Continuous pixel coordinates per axis, plus out-of-hull flags."""
        coords, outside = [], []
        shape = self.values.shape
        if self.dim == 1:
            axes = [(0, shape[0], False)]
        else:
            # x -> column index, y -> row index (row 0 at top: reversed)
            axes = [(0, shape[1], False), (1, shape[0], True)]
        for axis, n, reverse in axes:
            lo, hi = self.domain_box[axis]
            h = (hi - lo) / n
            f = (points[:, axis] - lo) / h - 0.5
            if reverse:
                f = (n - 1) - f
            outside.append((f < 0.0) | (f > n - 1))
            coords.append(np.clip(f, 0.0, n - 1))
        return coords, outside

    @staticmethod
    def _cell_split(f, n):
        """Lower-index-cell split of a clamped pixel coordinate."""
        i0 = np.clip(np.ceil(f).astype(np.int64) - 1, 0, n - 2)
        return i0, f - i0

    def eval(self, points):
        pts, scalar = self._as_points(points)
        coords, _ = self._axis_coord(pts)
        v = self.values
        if self.dim == 1:
            i0, t = self._cell_split(coords[0], v.shape[0])
            out = (1 - t) * v[i0] + t * v[i0 + 1]
        else:
            c0, tx = self._cell_split(coords[0], v.shape[1])
            r0, ty = self._cell_split(coords[1], v.shape[0])
            out = ((1 - tx) * (1 - ty) * v[r0, c0]
                   + tx * (1 - ty) * v[r0, c0 + 1]
                   + (1 - tx) * ty * v[r0 + 1, c0]
                   + tx * ty * v[r0 + 1, c0 + 1])
        return float(out[0]) if scalar else out

    def eval_grad(self, points):
        pts, scalar = self._as_points(points)
        coords, outside = self._axis_coord(pts)
        v = self.values
        grad = np.zeros_like(pts)
        if self.dim == 1:
            (lo, hi), = self.domain_box
            h = (hi - lo) / v.shape[0]
            i0, _ = self._cell_split(coords[0], v.shape[0])
            grad[:, 0] = (v[i0 + 1] - v[i0]) / h
        else:
            (x0, x1), (y0, y1) = self.domain_box
            hx = (x1 - x0) / v.shape[1]
            hy = (y1 - y0) / v.shape[0]
            c0, tx = self._cell_split(coords[0], v.shape[1])
            r0, ty = self._cell_split(coords[1], v.shape[0])
            grad[:, 0] = ((1 - ty) * (v[r0, c0 + 1] - v[r0, c0])
                          + ty * (v[r0 + 1, c0 + 1] - v[r0 + 1, c0])) / hx
            # row index grows downward: d(row)/dy = -1/hy
            grad[:, 1] = -((1 - tx) * (v[r0 + 1, c0] - v[r0, c0])
                           + tx * (v[r0 + 1, c0 + 1] - v[r0, c0 + 1])) / hy
        for axis, mask in enumerate(outside):
            grad[mask, axis] = 0.0  # constant extrapolation outside the hull
        return grad[0] if scalar else grad

    def _grad_sample_points(self, samples_per_cell):
        """Centers of (subdivided) interpolation cells."""
        s = int(samples_per_cell)
        axes = []
        shape = self.values.shape
        if self.dim == 1:
            ns = [shape[0]]
        else:
            ns = [shape[1], shape[0]]
        for axis, n in enumerate(ns):
            lo, hi = self.domain_box[axis]
            h = (hi - lo) / n
            first_center = lo + 0.5 * h
            cells = n - 1
            sub = (np.arange(cells * s) + 0.5) / s
            axes.append(first_center + sub * h)
        if self.dim == 1:
            return axes[0][:, None]
        X, Y = np.meshgrid(axes[0], axes[1], indexing="xy")
        return np.column_stack([X.ravel(), Y.ravel()])


class AnalyticField(ImageField):
    """Closed-form grey-level profile; no pixel grid."""

    def __init__(self, kind, value_fn, grad_fn, dim, domain_box=None, params=None):
        self.kind = kind
        self._value_fn = value_fn
        self._grad_fn = grad_fn
        self.dim = dim
        if domain_box is None:
            domain_box = ((0.0, 1.0),) * dim
        self.domain_box = tuple((float(lo), float(hi)) for lo, hi in domain_box)
        self.params = dict(params or {})

    def eval(self, points):
        pts, scalar = self._as_points(points)
        out = self._value_fn(pts)
        return float(out[0]) if scalar else out

    def eval_grad(self, points):
        pts, scalar = self._as_points(points)
        out = self._grad_fn(pts)
        return out[0] if scalar else out

    def _grad_sample_points(self, samples_per_cell):
        s = int(samples_per_cell) * ANALYTIC_LATTICE
        axes = []
        for lo, hi in self.domain_box:
            h = (hi - lo) / s
            axes.append(lo + (np.arange(s) + 0.5) * h)
        if self.dim == 1:
            return axes[0][:, None]
        X, Y = np.meshgrid(axes[0], axes[1], indexing="xy")
        return np.column_stack([X.ravel(), Y.ravel()])


class ScaledField(ImageField):
    """L * g wrapper used by the solution scaling procedure."""

    def __init__(self, base, factor):
        self.base = base
        self.factor = float(factor)
        self.dim = base.dim
        self.domain_box = base.domain_box
        self.noise_amplitude = base.noise_amplitude
        self.rng_seed = base.rng_seed

    def eval(self, points):
        return self.factor * np.asarray(self.base.eval(points))

    def eval_grad(self, points):
        return self.factor * self.base.eval_grad(points)

    def _grad_sample_points(self, samples_per_cell):
        return self.base._grad_sample_points(samples_per_cell)


# ----------------------------------------------------------------------
# constructors

def analytic_field(kind, **params):
    """Analytic test profiles.

    kind:
      * ``tanh1d``   -- 0.5*(1 + tanh(s*(x - jump))); params: steepness,
        jump (default 0.5).
      * ``circle2d`` -- 0.49*(2 + tanh(s*(rho - r)) - tanh(s*(rho + r)))
        with rho the distance to the center: a dark disc of radius ~r on a
        bright background; params: steepness (50), radius (0.05),
        center ((0.5, 0.5)).
      * ``constant`` -- params: value, dim (default 2).
    """
    if kind == "tanh1d":
        s = float(params.pop("steepness"))
        jump = float(params.pop("jump", 0.5))
        _reject_extra(kind, params)

        def value(p):
            return 0.5 * (1.0 + np.tanh(s * (p[:, 0] - jump)))

        def grad(p):
            sech2 = 1.0 / np.cosh(s * (p[:, 0] - jump)) ** 2
            return (0.5 * s * sech2)[:, None]

        return AnalyticField(kind, value, grad, 1,
                             params={"steepness": s, "jump": jump})

    if kind == "circle2d":
        s = float(params.pop("steepness", 50.0))
        r = float(params.pop("radius", 0.05))
        center = np.asarray(params.pop("center", (0.5, 0.5)), dtype=float)
        _reject_extra(kind, params)

        def value(p):
            rho = np.linalg.norm(p - center, axis=1)
            return 0.49 * (2.0 + np.tanh(s * (rho - r)) - np.tanh(s * (rho + r)))

        def grad(p):
            diff = p - center
            rho = np.linalg.norm(diff, axis=1)
            d_rho = 0.49 * s * (1.0 / np.cosh(s * (rho - r)) ** 2
                                - 1.0 / np.cosh(s * (rho + r)) ** 2)
            safe = np.where(rho > 0, rho, 1.0)
            unit = np.where(rho[:, None] > 0, diff / safe[:, None], 0.0)
            return d_rho[:, None] * unit

        return AnalyticField(kind, value, grad, 2,
                             params={"steepness": s, "radius": r,
                                     "center": tuple(center)})

    if kind == "constant":
        c = float(params.pop("value"))
        dim = int(params.pop("dim", 2))
        _reject_extra(kind, params)
        return AnalyticField(
            kind,
            lambda p: np.full(len(p), c),
            lambda p: np.zeros_like(p),
            dim, params={"value": c})

    raise ValueError(f"unknown analytic field kind {kind!r}")


def _reject_extra(kind, params):
    if params:
        raise ValueError(f"unknown parameters for {kind}: {sorted(params)}")


# ----------------------------------------------------------------------
# PGM input / output

def load_image(path, domain_box=None):
    """Read an 8-bit grey-scale PGM (P2 ASCII or P5 binary) into a field.

    Grey levels are normalized by the file's maxval so values land in
    [0, 1].  Pixel (r, c) sits at the center of its cell in domain_box,
    row 0 at the top.
    """
    data = Path(path).read_bytes()
    magic, pos = _pgm_token(data, 0)
    if magic in (b"P3", b"P6"):
        raise PgmParseError("color PPM is not grey-scale; convert to PGM", 0)
    if magic not in (b"P2", b"P5"):
        raise PgmParseError(f"not a PGM file (magic {magic!r})", 0)
    width, pos = _pgm_int(data, pos, "width")
    height, pos = _pgm_int(data, pos, "height")
    maxval_at = pos
    maxval, pos = _pgm_int(data, pos, "maxval")
    if width < 1 or height < 1:
        raise PgmParseError("empty image", maxval_at)
    if not 1 <= maxval <= 255:
        raise PgmParseError(f"only 8-bit PGM supported (maxval {maxval})", maxval_at)

    n = width * height
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        if len(data) - pos < n:
            raise PgmParseError(
                f"truncated pixel data ({len(data) - pos} of {n} bytes)", len(data))
        values = np.frombuffer(data[pos:pos + n], dtype=np.uint8).astype(float)
    else:
        values = np.empty(n)
        for i in range(n):
            tok, tok_at, pos = _pgm_raw_token(data, pos)
            try:
                values[i] = int(tok)
            except ValueError:
                raise PgmParseError(f"bad pixel token {tok!r}", tok_at) from None
            if values[i] > maxval:
                raise PgmParseError(
                    f"pixel value {int(values[i])} exceeds maxval {maxval}", tok_at)
    values = values.reshape(height, width) / maxval
    return RasterField(values, domain_box)


def _pgm_raw_token(data, pos):
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            break
    if pos >= len(data):
        raise PgmParseError("unexpected end of file", len(data))
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], start, pos


def _pgm_token(data, pos):
    tok, _, new_pos = _pgm_raw_token(data, pos)
    return tok, new_pos


def _pgm_int(data, pos, name):
    tok, tok_at, new_pos = _pgm_raw_token(data, pos)
    try:
        return int(tok), new_pos
    except ValueError:
        raise PgmParseError(f"bad {name} token {tok!r}", tok_at) from None


def save_pgm(values, path, *, binary=True):
    """Write a 2D array as an 8-bit PGM, clamping to [0, 1] first."""
    arr = np.atleast_2d(np.asarray(values, dtype=float))
    pix = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    rows, cols = pix.shape
    header = f"{'P5' if binary else 'P2'}\n{cols} {rows}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pix.tobytes())
        else:
            fh.write("\n".join(" ".join(str(v) for v in row) for row in pix)
                     .encode("ascii"))
            fh.write(b"\n")


# ----------------------------------------------------------------------
# statistics, noise, scaling

def grad_stats(field, samples_per_cell=1):
    """Max/min of |grad g| over the field's sampling lattice.

    Raster fields sample the centers of the interpolation cells; analytic
    fields a 512^d lattice (times samples_per_cell along each axis).
    """
    if samples_per_cell < 1:
        raise ValueError("samples_per_cell must be >= 1")
    pts = field._grad_sample_points(samples_per_cell)
    g = field.eval_grad(pts)
    norms = np.linalg.norm(g, axis=1)
    if field.dim == 1:
        resolution = (len(pts),)
    else:
        side = int(round(math.sqrt(len(pts))))
        resolution = (side, side) if side * side == len(pts) else (len(pts),)
    return GradStats(float(norms.max()), float(norms.min()), resolution)


def add_noise(field, amplitude, seed):
    """Independent uniform(-amplitude, amplitude) noise per pixel.

    Analytic fields are first sampled onto the standard evaluation lattice
    and the noisy samples are re-interpolated.  Deterministic given seed;
    amplitude 0 returns the field itself.
    """
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    if amplitude == 0:
        return field
    if isinstance(field, RasterField):
        base = field.values
        box = field.domain_box
    else:
        pts = field._grad_sample_points(1)
        vals = field.eval(pts)
        if field.dim == 1:
            base = vals
        else:
            side = int(round(math.sqrt(len(pts))))
            # _grad_sample_points runs x fastest, y upward: flip to rows-down
            base = vals.reshape(side, side)[::-1]
        box = field.domain_box
    rng = np.random.default_rng(seed)
    noisy = base + rng.uniform(-amplitude, amplitude, base.shape)
    return RasterField(noisy, box, noise_amplitude=amplitude, rng_seed=seed)


def scaled(field, factor):
    """The field factor * g (used for the gradient-amplifying scaling)."""
    if factor == 1.0:
        return field
    return ScaledField(field, factor)
