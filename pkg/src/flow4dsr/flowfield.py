"""Analytic, divergence-free tube flows on uniform voxel grids.

Volumes are indexed ``[ix, iy, iz]`` so array axis 0 is the x direction.
Velocities are in cm/s, lengths in mm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, RangeError, ValidationError

DEFAULT_SPACING_MM = 0.594
AXES = ("x", "y", "z")
FLOW_KINDS = ("poiseuille_tube", "helical_tube", "stenosed_tube")

# Piecewise-linear cardiac-like scale curve: systolic peak then a smaller
# diastolic lobe, spanning 0.70 s so 71 frames land on a 10 ms step.
DEFAULT_WAVEFORM = (
    (0.00, 0.15),
    (0.08, 0.70),
    (0.15, 1.00),
    (0.25, 0.45),
    (0.32, 0.20),
    (0.40, 0.35),
    (0.50, 0.20),
    (0.70, 0.15),
)


@dataclass(frozen=True)
class Grid3:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (DEFAULT_SPACING_MM,) * 3

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValidationError("Grid3 needs three dims and three spacings")
        if min(dims) < 4:
            raise ValidationError(f"grid dims must all be >= 4, got {dims}")
        if not all(math.isfinite(s) and s > 0 for s in spacing):
            raise ValidationError(f"grid spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    def coordinates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Voxel-centre coordinates (mm) relative to the grid centre, broadcastable."""
        out = []
        for ax, (n, h) in enumerate(zip(self.dims, self.spacing)):
            c = (np.arange(n, dtype=np.float64) - (n - 1) / 2.0) * h
            shape = [1, 1, 1]
            shape[ax] = n
            out.append(c.reshape(shape))
        return tuple(out)

    def coarsened(self, factor: int = 2) -> "Grid3":
        return Grid3(tuple(d // factor for d in self.dims), tuple(s * factor for s in self.spacing))

    def refined(self, factor: int = 2) -> "Grid3":
        return Grid3(tuple(d * factor for d in self.dims), tuple(s / factor for s in self.spacing))


@dataclass
class VelocityField:
    grid: Grid3
    vx: np.ndarray
    vy: np.ndarray
    vz: np.ndarray

    def __post_init__(self):
        for name in ("vx", "vy", "vz"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != self.grid.dims:
                raise ValidationError(f"{name} has shape {arr.shape}, grid is {self.grid.dims}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    @classmethod
    def from_stack(cls, grid: Grid3, stack: np.ndarray) -> "VelocityField":
        return cls(grid, stack[0], stack[1], stack[2])

    def stack(self) -> np.ndarray:
        return np.stack([self.vx, self.vy, self.vz])

    def speed(self) -> np.ndarray:
        return np.sqrt(self.vx**2 + self.vy**2 + self.vz**2)

    def max_abs_components(self) -> tuple[float, float, float]:
        return tuple(float(np.max(np.abs(c))) for c in (self.vx, self.vy, self.vz))

    def scaled(self, factor: float) -> "VelocityField":
        return VelocityField(self.grid, self.vx * factor, self.vy * factor, self.vz * factor)


@dataclass
class FluidMask:
    grid: Grid3
    inside: np.ndarray

    def __post_init__(self):
        self.inside = np.asarray(self.inside, dtype=bool)
        if self.inside.shape != self.grid.dims:
            raise ValidationError(f"mask shape {self.inside.shape} does not match grid {self.grid.dims}")

    @property
    def fraction(self) -> float:
        return float(self.inside.mean())


@dataclass
class FlowSpec:
    kind: str = "poiseuille_tube"
    axis: str = "x"
    radius_mm: float = 8.0
    peak_speed_cm_s: float = 100.0
    swirl_ratio: float = 0.0
    stenosis_factor: float = 1.0
    # Axial length of the cosine taper; None means half the axial extent.
    stenosis_length_mm: float | None = None
    waveform: Sequence[tuple[float, float]] = field(default_factory=lambda: list(DEFAULT_WAVEFORM))

    @classmethod
    def from_dict(cls, d: dict) -> "FlowSpec":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ValidationError(f"unknown flow spec keys: {sorted(unknown)}")
        if "waveform" in known:
            known["waveform"] = [tuple(p) for p in known["waveform"]]
        return cls(**known)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "axis": self.axis,
            "radius_mm": self.radius_mm,
            "peak_speed_cm_s": self.peak_speed_cm_s,
            "swirl_ratio": self.swirl_ratio,
            "stenosis_factor": self.stenosis_factor,
            "stenosis_length_mm": self.stenosis_length_mm,
            "waveform": [list(p) for p in self.waveform],
        }

    def validate(self, grid: Grid3) -> None:
        if self.kind not in FLOW_KINDS:
            raise ValidationError(f"unknown flow kind {self.kind!r}; expected one of {FLOW_KINDS}")
        if self.axis not in AXES:
            raise ValidationError(f"axis must be one of {AXES}, got {self.axis!r}")
        scalars = [self.radius_mm, self.peak_speed_cm_s, self.swirl_ratio, self.stenosis_factor]
        if self.stenosis_length_mm is not None:
            scalars.append(self.stenosis_length_mm)
        if not all(math.isfinite(float(v)) for v in scalars):
            raise ValidationError("flow spec contains non-finite values")
        if self.radius_mm <= 0:
            raise ValidationError("radius_mm must be positive")
        if self.peak_speed_cm_s <= 0:
            raise ValidationError("peak_speed_cm_s must be positive")
        if not 0.0 < self.stenosis_factor <= 1.0:
            raise ValidationError("stenosis_factor must lie in (0, 1]")
        if self.stenosis_length_mm is not None and self.stenosis_length_mm <= 0:
            raise ValidationError("stenosis_length_mm must be positive")
        _check_waveform(self.waveform)
        ax = AXES.index(self.axis)
        half_extent = min(grid.dims[i] * grid.spacing[i] / 2.0 for i in range(3) if i != ax)
        if self.radius_mm > half_extent:
            raise ConfigError(
                f"tube radius {self.radius_mm} mm exceeds the transverse half-extent {half_extent:.3f} mm"
            )


def _check_waveform(waveform) -> tuple[np.ndarray, np.ndarray]:
    if len(waveform) == 0:
        raise ValidationError("waveform must contain at least one point")
    pts = np.asarray(waveform, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValidationError("waveform must be a list of (time_s, scale) pairs")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("waveform contains non-finite values")
    t, s = pts[:, 0], pts[:, 1]
    if np.any(np.diff(t) <= 0):
        raise ValidationError("waveform times must be strictly increasing")
    if np.any(s < 0):
        raise ValidationError("waveform scales must be >= 0")
    return t, s


def _transverse_axes(ax: int) -> tuple[int, int]:
    # right-handed (p, q, axial) ordering
    return {0: (1, 2), 1: (2, 0), 2: (0, 1)}[ax]


def stenosis_radius(s: np.ndarray, radius: float, factor: float, length: float) -> tuple[np.ndarray, np.ndarray]:
    """Cosine-tapered radius R(s) and its derivative dR/ds, narrowest at s = 0."""
    s = np.asarray(s, dtype=np.float64)
    inside = np.abs(s) <= length / 2.0
    phase = 2.0 * np.pi * s / length
    depth = radius * (1.0 - factor)
    r = np.where(inside, radius - depth * 0.5 * (1.0 + np.cos(phase)), radius)
    dr = np.where(inside, depth * 0.5 * (2.0 * np.pi / length) * np.sin(phase), 0.0)
    return r, dr


def generate_field(spec: FlowSpec, grid: Grid3) -> tuple[VelocityField, FluidMask]:
    """Evaluate the steady (unit-waveform) velocity field of ``spec`` on ``grid``.

    The stenosed tube carries the radial velocity implied by the axisymmetric
    stream function of a locally parabolic profile, so the continuous field
    is exactly solenoidal and the flow rate is constant along the axis.
    """
    spec.validate(grid)
    ax = AXES.index(spec.axis)
    ip, iq = _transverse_axes(ax)
    coords = grid.coordinates()
    full = grid.dims
    p = np.broadcast_to(coords[ip], full)
    q = np.broadcast_to(coords[iq], full)
    s = np.broadcast_to(coords[ax], full)
    r = np.sqrt(p**2 + q**2)
    peak = float(spec.peak_speed_cm_s)
    comps = [np.zeros(full), np.zeros(full), np.zeros(full)]

    if spec.kind == "stenosed_tube":
        axial_extent = grid.dims[ax] * grid.spacing[ax]
        length = spec.stenosis_length_mm or axial_extent / 2.0
        R, dR = stenosis_radius(s, spec.radius_mm, spec.stenosis_factor, length)
        inside = r <= R
        eta = r / R
        centre = peak * (spec.radius_mm / R) ** 2
        axial = centre * (1.0 - eta**2)
        radial = centre * eta * (1.0 - eta**2) * dR
        with np.errstate(invalid="ignore", divide="ignore"):
            cos_t = np.where(r > 0, p / np.where(r > 0, r, 1.0), 0.0)
            sin_t = np.where(r > 0, q / np.where(r > 0, r, 1.0), 0.0)
        comps[ax] = axial
        comps[ip] = radial * cos_t
        comps[iq] = radial * sin_t
    else:
        R = float(spec.radius_mm)
        inside = r <= R
        comps[ax] = peak * (1.0 - (r / R) ** 2)
        if spec.kind == "helical_tube":
            omega = spec.swirl_ratio * peak / R
            comps[ip] = -omega * q
            comps[iq] = omega * p

    inside = np.ascontiguousarray(inside)
    vx, vy, vz = (np.where(inside, c, 0.0) for c in comps)
    return VelocityField(grid, vx, vy, vz), FluidMask(grid, inside)


def waveform_scale(waveform, t: float) -> float:
    times, scales = _check_waveform(waveform)
    if not times[0] <= t <= times[-1]:
        raise RangeError(f"t={t} outside waveform span [{times[0]}, {times[-1]}]")
    return float(np.interp(t, times, scales))


def modulate_temporal(velocity: VelocityField, waveform, t: float) -> VelocityField:
    return velocity.scaled(waveform_scale(waveform, t))


def frame_times(waveform, n_frames: int) -> np.ndarray:
    if n_frames < 1:
        raise ValidationError(f"n_frames must be >= 1, got {n_frames}")
    times, _ = _check_waveform(waveform)
    if n_frames == 1:
        return times[:1].copy()
    return np.linspace(times[0], times[-1], n_frames)


def sample_frames(spec: FlowSpec, grid: Grid3, n_frames: int) -> list[tuple[VelocityField, FluidMask]]:
    """Frames at uniform times over the waveform span, sharing one mask."""
    ts = frame_times(spec.waveform, n_frames)
    base, mask = generate_field(spec, grid)
    return [(modulate_temporal(base, spec.waveform, float(t)), mask) for t in ts]
