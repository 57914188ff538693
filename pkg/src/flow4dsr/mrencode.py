"""Velocity <-> phase encoding and synthetic magnitude images."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import AliasingError, ValidationError
from .flowfield import FluidMask

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncodingParams:
    venc: tuple[float, float, float]
    fluid_intensity: float

    def __post_init__(self):
        venc = tuple(float(v) for v in self.venc)
        if len(venc) != 3 or min(venc) <= 0:
            raise ValidationError(f"venc must be three positive values, got {self.venc}")
        if not self.fluid_intensity > 0:
            raise ValidationError("fluid_intensity must be positive")
        object.__setattr__(self, "venc", venc)

    @property
    def venc_max(self) -> float:
        return max(self.venc)


@dataclass
class MagnitudeSet:
    mx: np.ndarray
    my: np.ndarray
    mz: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.mx, self.my, self.mz])


def encode_phase(v: np.ndarray, venc: float) -> np.ndarray:
    """Map velocities in [-venc, venc] linearly onto phases in [-pi, pi].

    Raises AliasingError instead of wrapping when any |v| exceeds venc.
    """
    if venc <= 0:
        raise ValidationError("venc must be positive")
    v = np.asarray(v, dtype=np.float64)
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    if peak > venc:
        raise AliasingError(f"max |v| = {peak:.4g} cm/s exceeds venc = {venc:.4g} cm/s")
    return np.pi * v / venc


def decode_velocity(phase: np.ndarray, venc: float) -> np.ndarray:
    if venc <= 0:
        raise ValidationError("venc must be positive")
    phase = np.asarray(phase, dtype=np.float64)
    if phase.size and float(np.max(np.abs(phase))) > np.pi * (1 + 1e-12):
        raise ValidationError("phase values must lie in [-pi, pi]")
    return venc * phase / np.pi


def synth_magnitude(mask: FluidMask, fluid_intensity: float) -> MagnitudeSet:
    """Constant fluid signal inside ``mask``, zero (no signal) elsewhere."""
    if not fluid_intensity > 0:
        raise ValidationError("fluid_intensity must be positive")
    if not mask.inside.any():
        warnings.warn("fluid mask is empty; magnitude images are all zero", RuntimeWarning, stacklevel=2)
    m = np.where(mask.inside, float(fluid_intensity), 0.0)
    return MagnitudeSet(m, m.copy(), m.copy())


def to_complex(phase: np.ndarray, magnitude: np.ndarray) -> np.ndarray:
    phase = np.asarray(phase, dtype=np.float64)
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if phase.shape != magnitude.shape:
        raise ValidationError(f"phase shape {phase.shape} != magnitude shape {magnitude.shape}")
    return magnitude * np.exp(1j * phase)


def from_complex(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (magnitude, phase); the phase of an exact zero is reported as 0."""
    values = np.asarray(values)
    mag = np.abs(values)
    phase = np.where(mag > 0, np.angle(values), 0.0)
    return mag, phase
