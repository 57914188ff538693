"""Flow metrics and non-learned upsampling baselines.

Fields may be passed as VelocityField or as stacked ``(3, X, Y, Z)`` arrays.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError
from .flowfield import AXES, FluidMask, VelocityField

DEFAULT_EPSILON = 1e-5


def _stack(f) -> np.ndarray:
    if isinstance(f, VelocityField):
        return f.stack()
    arr = np.asarray(f, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[0] != 3:
        raise ValidationError(f"expected a (3, X, Y, Z) velocity stack, got {arr.shape}")
    return arr


def _mask(mask) -> np.ndarray:
    return mask.inside if isinstance(mask, FluidMask) else np.asarray(mask, dtype=bool)


def _spacing(f, spacing) -> tuple[float, float, float]:
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    if isinstance(f, VelocityField):
        return f.grid.spacing
    return (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class MetricConfig:
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")


def rel_speed_error(pred, truth, mask, epsilon: float = DEFAULT_EPSILON) -> float:
    """Mean over fluid voxels of |pred - truth| / sqrt(|truth|^2 + epsilon)."""
    p, t = _stack(pred), _stack(truth)
    m = _mask(mask)
    if p.shape != t.shape or m.shape != t.shape[1:]:
        raise ValidationError("pred, truth and mask shapes disagree")
    if not m.any():
        raise ValidationError("relative speed error needs a non-empty mask")
    err = np.sqrt(np.sum((p - t) ** 2, axis=0))
    ref = np.sqrt(np.sum(t**2, axis=0) + epsilon)
    return float(np.mean(err[m] / ref[m]))


@dataclass
class PlaneSpec:
    """Axis-aligned analysis plane; ``region`` of None means the whole plane."""

    axis: int | str
    index: int
    region: np.ndarray | None = None

    @property
    def axis_index(self) -> int:
        return AXES.index(self.axis) if isinstance(self.axis, str) else int(self.axis)


def _plane_region(plane: PlaneSpec, shape) -> tuple[int, np.ndarray]:
    ax = plane.axis_index
    if not 0 <= plane.index < shape[ax]:
        raise ValidationError(f"plane index {plane.index} outside axis of length {shape[ax]}")
    plane_shape = tuple(n for i, n in enumerate(shape) if i != ax)
    region = np.ones(plane_shape, bool) if plane.region is None else np.asarray(plane.region, bool)
    if region.shape != plane_shape:
        raise ValidationError(f"plane region shape {region.shape} != {plane_shape}")
    if not region.any():
        raise ValidationError("plane region is empty")
    return ax, region


def flow_rate(f, plane: PlaneSpec, spacing=None) -> float:
    """Through-plane flow in mL/s (cm/s velocities, mm spacing)."""
    v = _stack(f)
    h = _spacing(f, spacing)
    ax, region = _plane_region(plane, v.shape[1:])
    through = np.take(v[ax], plane.index, axis=ax)
    area_cm2 = np.prod([h[i] for i in range(3) if i != ax]) / 100.0
    return float(np.sum(through[region]) * area_cm2)


@dataclass(frozen=True)
class FlowRateComparison:
    truth: float
    pred: float

    @property
    def difference(self) -> float:
        return self.pred - self.truth

    @property
    def percent(self) -> float:
        return 100.0 * self.difference / self.truth

    def formatted(self) -> str:
        return f"{self.difference:.1f} ({self.percent:.1f}%)"


def compare_flow_rates(truth: float, pred: float) -> FlowRateComparison:
    if truth == 0:
        raise ValidationError("relative flow-rate error undefined for zero reference flow")
    return FlowRateComparison(float(truth), float(pred))


def interior_mask(mask, shape=None) -> np.ndarray:
    """Mask voxels whose full 6-neighbour central-difference stencil is in the mask."""
    m = np.ones(shape, bool) if mask is None else _mask(mask)
    out = np.zeros_like(m)
    core = m[1:-1, 1:-1, 1:-1].copy()
    for ax in range(3):
        for shift in (-1, 1):
            sl = [slice(1, -1)] * 3
            sl[ax] = slice(1 + shift, m.shape[ax] - 1 + shift)
            core &= m[tuple(sl)]
    out[1:-1, 1:-1, 1:-1] = core
    return out


def central_difference(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    """(a[i+1] - a[i-1]) / (2h) on interior samples, zero on the two end faces."""
    out = np.zeros_like(a, dtype=np.float64)
    n = a.shape[axis]
    hi = [slice(None)] * a.ndim
    lo = [slice(None)] * a.ndim
    mid = [slice(None)] * a.ndim
    hi[axis], lo[axis], mid[axis] = slice(2, n), slice(0, n - 2), slice(1, n - 1)
    out[tuple(mid)] = (a[tuple(hi)] - a[tuple(lo)]) / (2.0 * h)
    return out


def divergence_field(f, mask=None, spacing=None) -> np.ndarray:
    v = _stack(f)
    if min(v.shape[1:]) < 3:
        raise ValidationError("divergence needs at least 3 voxels per axis")
    h = _spacing(f, spacing)
    div = sum(central_difference(v[i], i, h[i]) for i in range(3))
    keep = interior_mask(mask, v.shape[1:])
    return np.where(keep, div, 0.0)


@dataclass(frozen=True)
class BlandAltman:
    bias: float
    sd: float
    lo: float
    hi: float
    n: int


def bland_altman(pred_samples, truth_samples) -> BlandAltman:
    p = np.asarray(pred_samples, dtype=np.float64).ravel()
    t = np.asarray(truth_samples, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValidationError("paired samples must have equal length")
    if p.size < 2:
        raise ValidationError("Bland-Altman needs at least 2 pairs")
    d = p - t
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return BlandAltman(bias, sd, bias - 1.96 * sd, bias + 1.96 * sd, int(p.size))


def sample_fluid_points(mask, n: int = 50_000, seed: int = 0) -> tuple[np.ndarray, ...]:
    """Random voxel indices inside the mask (without replacement when possible)."""
    idx = np.flatnonzero(_mask(mask))
    if idx.size == 0:
        raise ValidationError("cannot sample from an empty mask")
    rng = np.random.default_rng(seed)
    pick = rng.choice(idx, size=n, replace=idx.size < n)
    return np.unravel_index(pick, _mask(mask).shape)


# --- interpolation baselines ---------------------------------------------------

def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel-centre convention shared with the network's upsampling layer
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def _linear_1d(a: np.ndarray, axis: int, factor: int) -> np.ndarray:
    n = a.shape[axis]
    src = np.clip(_source_coords(n, n * factor), 0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    w = src - i0
    shape = [1] * a.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1 - w) + np.take(a, i1, axis=axis) * w


def _cubic_weights(t: np.ndarray) -> list[np.ndarray]:
    # 4-point Lagrange cubic on nodes -1, 0, 1, 2
    return [
        -t * (t - 1) * (t - 2) / 6.0,
        (t + 1) * (t - 1) * (t - 2) / 2.0,
        -(t + 1) * t * (t - 2) / 2.0,
        (t + 1) * t * (t - 1) / 6.0,
    ]


def _cubic_1d(a: np.ndarray, axis: int, factor: int) -> np.ndarray:
    n = a.shape[axis]
    src = _source_coords(n, n * factor)
    i0 = np.floor(src).astype(int)
    t = src - i0
    shape = [1] * a.ndim
    shape[axis] = -1
    out = 0.0
    for offset, w in zip((-1, 0, 1, 2), _cubic_weights(t)):
        taps = np.clip(i0 + offset, 0, n - 1)
        out = out + np.take(a, taps, axis=axis) * w.reshape(shape)
    return out


def _separable(f, kernel, min_size: int, factor: int = 2):
    v = _stack(f)
    if min(v.shape[1:]) < min_size:
        raise ValidationError(f"input needs at least {min_size} voxels per axis, got {v.shape[1:]}")
    out = v
    for axis in (1, 2, 3):
        out = kernel(out, axis, factor)
    if isinstance(f, VelocityField):
        return VelocityField.from_stack(f.grid.refined(factor), out)
    return out


def upsample_trilinear_baseline(f, factor: int = 2):
    return _separable(f, _linear_1d, 2, factor)


def upsample_tricubic_baseline(f, factor: int = 2):
    return _separable(f, _cubic_1d, 4, factor)


def cubic_interior_slices(n_in: int, factor: int = 2) -> slice:
    """Output index range whose cubic taps never touch the clamped border."""
    src = _source_coords(n_in, n_in * factor)
    i0 = np.floor(src).astype(int)
    ok = np.flatnonzero((i0 - 1 >= 0) & (i0 + 2 <= n_in - 1))
    return slice(int(ok[0]), int(ok[-1]) + 1)


# --- reports ---------------------------------------------------------------------

@dataclass
class MetricReport:
    frame: int
    method: str
    rel_speed_error_mean: float
    flow_rates: list[dict] = field(default_factory=list)
    divergence: dict = field(default_factory=dict)
    bland_altman: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_frame(pred, truth, mask, planes: list[PlaneSpec], spacing, *, frame: int = 0,
                   method: str = "4dflownet", n_points: int = 50_000, seed: int = 0,
                   epsilon: float = DEFAULT_EPSILON) -> MetricReport:
    p, t = _stack(pred), _stack(truth)
    m = _mask(mask)
    rates = []
    for plane in planes:
        cmp = compare_flow_rates(flow_rate(t, plane, spacing), flow_rate(p, plane, spacing))
        rates.append({
            "axis": AXES[plane.axis_index],
            "index": plane.index,
            "truth_ml_s": cmp.truth,
            "pred_ml_s": cmp.pred,
            "difference_ml_s": cmp.difference,
            "percent_error": cmp.percent,
        })
    keep = interior_mask(m)
    div = divergence_field(p, m, spacing)
    div_stats = {
        "mean_abs": float(np.abs(div[keep]).mean()) if keep.any() else 0.0,
        "max_abs": float(np.abs(div[keep]).max()) if keep.any() else 0.0,
    }
    pts = sample_fluid_points(m, n_points, seed)
    ba = {}
    for i, name in enumerate(("vx", "vy", "vz")):
        ba[name] = asdict(bland_altman(p[i][pts], t[i][pts]))
    return MetricReport(
        frame=frame,
        method=method,
        rel_speed_error_mean=rel_speed_error(p, t, m, epsilon),
        flow_rates=rates,
        divergence=div_stats,
        bland_altman=ba,
    )


def default_planes(mask, axis: int | str, fractions=(0.25, 0.5, 0.75)) -> list[PlaneSpec]:
    """Planes across ``axis`` with their region set to the mask cross-section."""
    m = _mask(mask)
    ax = AXES.index(axis) if isinstance(axis, str) else int(axis)
    planes = []
    for frac in fractions:
        idx = int(round(frac * (m.shape[ax] - 1)))
        region = np.take(m, idx, axis=ax)
        if region.any():
            planes.append(PlaneSpec(ax, idx, region))
    return planes

