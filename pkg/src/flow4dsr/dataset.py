"""Augmented LR/HR patch pairs.

Per frame: choose VENC / fluid intensity / SNR, encode and downsample in
k-space, pick 10 patch origins, and emit each patch plus its 9 right-angle
rotations (100 records per frame).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .container import Container, ContainerWriter, Record
from .errors import UnsatisfiableError, ValidationError
from .flowfield import FluidMask, VelocityField
from .kspace import NoiseSpec, downsample_with_noise
from .mrencode import decode_velocity, encode_phase, from_complex, synth_magnitude, to_complex

log = logging.getLogger(__name__)

LR_PATCH = 16
HR_PATCH = 2 * LR_PATCH
MAGNITUDE_SCALE = 255.0
ROTATIONS = tuple((axis, angle) for axis in ("x", "y", "z") for angle in (90, 180, 270))
PATCH_LAYOUT = (
    [(f"lr_v{c}", (LR_PATCH,) * 3) for c in "xyz"]
    + [(f"lr_m{c}", (LR_PATCH,) * 3) for c in "xyz"]
    + [(f"hr_v{c}", (HR_PATCH,) * 3) for c in "xyz"]
)


@dataclass
class AugmentationPolicy:
    venc_choices: Sequence[float] = (30.0, 60.0, 100.0, 150.0, 200.0, 250.0, 300.0)
    intensity_range: tuple[float, float] = (60.0, 240.0)
    snr_range_db: tuple[float, float] = (14.0, 17.0)
    seed: int = 0

    def __post_init__(self):
        self.venc_choices = tuple(float(v) for v in self.venc_choices)
        if not self.venc_choices or list(self.venc_choices) != sorted(self.venc_choices):
            raise ValidationError("venc_choices must be non-empty and sorted ascending")
        for name in ("intensity_range", "snr_range_db"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValidationError(f"{name} must satisfy lo <= hi")
            setattr(self, name, (float(lo), float(hi)))

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["venc_choices"] = list(self.venc_choices)
        d["intensity_range"] = list(self.intensity_range)
        d["snr_range_db"] = list(self.snr_range_db)
        return d


@dataclass(frozen=True)
class Augmentation:
    venc: tuple[float, float, float]
    intensity: float
    snr_db: float


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def sample_augmentation(policy: AugmentationPolicy, frame_max_speed, draw_index: int = 0) -> Augmentation:
    """Per-component VENC from the choices strictly above that component's max |v|."""
    rng = _rng(policy.seed, draw_index)
    vencs = []
    for comp, vmax in zip("xyz", frame_max_speed):
        allowed = [v for v in policy.venc_choices if v > abs(vmax)]
        if not allowed:
            raise UnsatisfiableError(
                f"max |v{comp}| = {vmax:.1f} cm/s; no VENC above it in {list(policy.venc_choices)}"
            )
        vencs.append(float(allowed[rng.integers(len(allowed))]))
    intensity = float(rng.uniform(*policy.intensity_range))
    snr = float(rng.uniform(*policy.snr_range_db))
    return Augmentation(tuple(vencs), intensity, snr)


# --- MR encoding of a frame -------------------------------------------------------

def component_seeds(noise_seed: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(noise_seed).spawn(3)]


def encode_frame(velocity: VelocityField, mask: FluidMask, aug: Augmentation,
                 noise_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Noisy low-resolution (velocity cm/s, magnitude) stacks, each (3, X/2, Y/2, Z/2)."""
    mags = synth_magnitude(mask, aug.intensity)
    lr_v, lr_m = [], []
    for comp, mag, venc, seed in zip(
        (velocity.vx, velocity.vy, velocity.vz), (mags.mx, mags.my, mags.mz), aug.venc, component_seeds(noise_seed)
    ):
        hr_complex = to_complex(encode_phase(comp, venc), mag)
        lr_complex = downsample_with_noise(hr_complex, NoiseSpec(aug.snr_db, seed))
        m, phase = from_complex(lr_complex)
        lr_v.append(decode_velocity(phase, venc))
        lr_m.append(m)
    return np.stack(lr_v), np.stack(lr_m)


def block_mean(mask: np.ndarray, factor: int = 2) -> np.ndarray:
    """LR fluid-fraction map: mean of each factor^3 HR block."""
    m = np.asarray(mask, dtype=np.float64)
    x, y, z = (n // factor for n in m.shape)
    m = m[: x * factor, : y * factor, : z * factor]
    return m.reshape(x, factor, y, factor, z, factor).mean(axis=(1, 3, 5))


# --- patch sampling ----------------------------------------------------------------

def _patch_fraction(frac_lr: np.ndarray, origin, size: int) -> float:
    x, y, z = origin
    return float(frac_lr[x:x + size, y:y + size, z:z + size].mean())


def sample_origin(frac_lr: np.ndarray, rng: np.random.Generator, *, constrained: bool,
                  min_fluid: float = 0.2, size: int = LR_PATCH, max_attempts: int = 1000,
                  frame_id=None) -> tuple[int, int, int]:
    shape = frac_lr.shape
    if min(shape) < size:
        raise ValidationError(f"LR volume {shape} smaller than patch size {size}")
    for _ in range(max_attempts if constrained else 1):
        origin = tuple(int(rng.integers(0, n - size + 1)) for n in shape)
        if not constrained or _patch_fraction(frac_lr, origin, size) >= min_fluid:
            return origin
    raise UnsatisfiableError(
        f"frame {frame_id}: no {size}^3 patch with fluid fraction >= {min_fluid} "
        f"after {max_attempts} attempts"
    )


def extract_patches(frac_lr: np.ndarray, n: int = 10, min_fluid: float = 0.2, *,
                    rng: np.random.Generator, n_unconstrained: int = 1, size: int = LR_PATCH,
                    max_attempts: int = 1000, frame_id=None) -> list[tuple[int, int, int]]:
    """Random LR origins; all but the last ``n_unconstrained`` meet ``min_fluid``."""
    origins = []
    for i in range(n):
        constrained = i < n - n_unconstrained
        origins.append(sample_origin(frac_lr, rng, constrained=constrained, min_fluid=min_fluid,
                                     size=size, max_attempts=max_attempts, frame_id=frame_id))
    return origins


# --- patch pairs -------------------------------------------------------------------

@dataclass
class PatchPair:
    lr_velocity: np.ndarray  # (3, n, n, n), normalised by venc_max
    lr_mags: np.ndarray      # (3, n, n, n), intensity / 255
    hr_velocity: np.ndarray  # (3, 2n, 2n, 2n), normalised by venc_max
    venc: tuple[float, float, float]
    fluid_fraction: float

    def __post_init__(self):
        if self.hr_velocity.shape[1:] != tuple(2 * s for s in self.lr_velocity.shape[1:]):
            raise ValidationError("HR patch dims must be exactly twice the LR dims")
        if self.lr_mags.shape != self.lr_velocity.shape:
            raise ValidationError("LR magnitude and velocity patches differ in shape")

    @property
    def venc_max(self) -> float:
        return max(self.venc)

    def to_record(self) -> Record:
        arrays = {}
        for i, c in enumerate("xyz"):
            arrays[f"lr_v{c}"] = self.lr_velocity[i]
            arrays[f"lr_m{c}"] = self.lr_mags[i]
            arrays[f"hr_v{c}"] = self.hr_velocity[i]
        return Record(arrays, np.array([*self.venc, self.fluid_fraction], dtype=np.float32))

    @classmethod
    def from_record(cls, rec: Record) -> "PatchPair":
        a = rec.arrays
        return cls(
            np.stack([a[f"lr_v{c}"] for c in "xyz"]),
            np.stack([a[f"lr_m{c}"] for c in "xyz"]),
            np.stack([a[f"hr_v{c}"] for c in "xyz"]),
            rec.venc,
            rec.scalar,
        )


def normalize_pair(lr_velocity, lr_mags, hr_velocity, venc, fluid_fraction: float = 0.0) -> PatchPair:
    """Velocities / max(venc) into [-1, 1]; magnitudes / 255 clamped to [0, 1]."""
    venc = tuple(float(v) for v in venc)
    vmax = max(venc)
    lr_velocity = np.asarray(lr_velocity, dtype=np.float64)
    hr_velocity = np.asarray(hr_velocity, dtype=np.float64)
    worst = max(np.abs(lr_velocity).max(initial=0.0), np.abs(hr_velocity).max(initial=0.0))
    # tolerance absorbs float32 storage and phase round-trip error
    if worst > vmax * (1 + 1e-6):
        raise ValidationError(f"|v| = {worst:.4g} exceeds venc_max = {vmax:.4g}")
    return PatchPair(
        np.clip(lr_velocity / vmax, -1, 1).astype(np.float32),
        np.clip(np.asarray(lr_mags, dtype=np.float64) / MAGNITUDE_SCALE, 0, 1).astype(np.float32),
        np.clip(hr_velocity / vmax, -1, 1).astype(np.float32),
        venc,
        float(fluid_fraction),
    )


_PLANES = {"x": (1, 2), "y": (2, 0), "z": (0, 1)}


def rotation_matrix(axis: str, angle: int) -> np.ndarray:
    k = _quarter_turns(angle)
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k]
    a, b = _PLANES[axis]
    r = np.eye(3, dtype=int)
    r[a, a], r[a, b], r[b, a], r[b, b] = c, -s, s, c
    return r


def _quarter_turns(angle: int) -> int:
    if angle % 90:
        raise ValidationError(f"angle must be a multiple of 90, got {angle}")
    return (angle // 90) % 4


def rotate_scalar(vol: np.ndarray, axis: str, angle: int) -> np.ndarray:
    """Rotate a cubic volume about ``axis`` so that x' = R x about the cube centre."""
    if axis not in _PLANES:
        raise ValidationError(f"axis must be one of x, y, z; got {axis!r}")
    vol = np.asarray(vol)
    if len(set(vol.shape[-3:])) != 1:
        raise ValidationError(f"rotation needs cubic volumes, got {vol.shape[-3:]}")
    a, b = _PLANES[axis]
    off = vol.ndim - 3
    return np.rot90(vol, _quarter_turns(angle), axes=(off + a, off + b))


def rotate_vector(stack: np.ndarray, axis: str, angle: int) -> np.ndarray:
    """Rotate the grid of a (3, n, n, n) vector field and its components together."""
    r = rotation_matrix(axis, angle)
    moved = rotate_scalar(stack, axis, angle)
    return np.einsum("ij,j...->i...", r, moved)


def rotate_patch(pair: PatchPair, axis: str, angle: int) -> PatchPair:
    # per-direction magnitudes and VENCs follow their components, without sign
    perm = np.abs(rotation_matrix(axis, angle))
    mags = np.einsum("ij,j...->i...", perm, rotate_scalar(pair.lr_mags, axis, angle))
    return PatchPair(
        np.ascontiguousarray(rotate_vector(pair.lr_velocity, axis, angle)),
        np.ascontiguousarray(mags, dtype=pair.lr_mags.dtype),
        np.ascontiguousarray(rotate_vector(pair.hr_velocity, axis, angle)),
        tuple(float(v) for v in perm @ np.asarray(pair.venc)),
        pair.fluid_fraction,
    )


def with_rotations(pair: PatchPair) -> Iterator[PatchPair]:
    yield pair
    for axis, angle in ROTATIONS:
        yield rotate_patch(pair, axis, angle)


@dataclass
class FrameSample:
    """One HR frame plus the encoding choices applied to it."""

    velocity: VelocityField
    mask: FluidMask
    aug: Augmentation
    noise_seed: int
    frame_id: str = ""


def frame_patch_pairs(frame: FrameSample, n_patches: int, rng: np.random.Generator, *,
                      min_fluid: float = 0.2, n_unconstrained: int = 1,
                      rotate: bool = True) -> Iterator[PatchPair]:
    lr_v, lr_m = encode_frame(frame.velocity, frame.mask, frame.aug, frame.noise_seed)
    frac = block_mean(frame.mask.inside)
    origins = extract_patches(frac, n_patches, min_fluid, rng=rng, n_unconstrained=n_unconstrained,
                              frame_id=frame.frame_id)
    hr_v = frame.velocity.stack()
    s, S = LR_PATCH, HR_PATCH
    for x, y, z in origins:
        pair = normalize_pair(
            lr_v[:, x:x + s, y:y + s, z:z + s],
            lr_m[:, x:x + s, y:y + s, z:z + s],
            hr_v[:, 2 * x:2 * x + S, 2 * y:2 * y + S, 2 * z:2 * z + S],
            frame.aug.venc,
            _patch_fraction(frac, (x, y, z), s),
        )
        yield from (with_rotations(pair) if rotate else (pair,))


@dataclass
class SplitPlan:
    patches_per_frame: int
    rotations: bool = True

    def records_per_frame(self) -> int:
        return self.patches_per_frame * ((1 + len(ROTATIONS)) if self.rotations else 1)

    def count(self, n_frames: int, n_sources: int = 1) -> int:
        return n_frames * n_sources * self.records_per_frame()


TRAIN_PLAN = SplitPlan(patches_per_frame=10)
VALIDATION_PLAN = SplitPlan(patches_per_frame=1)


@dataclass
class DatasetManifest:
    counts: dict[str, int] = field(default_factory=dict)
    sources: dict[str, list[str]] = field(default_factory=dict)
    policy: dict = field(default_factory=dict)
    format_version: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(**d)


def write_dataset(records: Iterable[PatchPair], path, *, split: str = "train", seed: int = 0,
                  policy: AugmentationPolicy | None = None, spacing_mm=None,
                  sources: Sequence[str] = ()) -> DatasetManifest:
    header = {
        "kind": "patches",
        "split": split,
        "seed": int(seed),
        "dims": {"lr": [LR_PATCH] * 3, "hr": [HR_PATCH] * 3},
        "spacing_mm": list(spacing_mm) if spacing_mm is not None else None,
        "policy": policy.to_dict() if policy else None,
        "venc_choices": list(policy.venc_choices) if policy else None,
        "sources": list(sources),
    }
    with ContainerWriter(path, PATCH_LAYOUT, header) as w:
        for pair in records:
            rec = pair.to_record()
            w.append(rec.arrays, rec.meta)
        count = w.count
    return DatasetManifest(
        counts={split: count},
        sources={split: list(sources)},
        policy=policy.to_dict() if policy else {},
    )


class PatchDataset:
    """Random access to stored patch pairs (memory mapped)."""

    def __init__(self, path, verify: bool = True):
        self.container = Container(path, verify=verify)
        if self.container.header.get("kind") != "patches":
            raise ValidationError(f"{path} is not a patch container")
        self.header = self.container.header

    def __len__(self) -> int:
        return len(self.container)

    def __getitem__(self, i: int) -> PatchPair:
        return PatchPair.from_record(self.container[i])

    def __iter__(self) -> Iterator[PatchPair]:
        for i in range(len(self)):
            yield self[i]

    @property
    def spacing_mm(self):
        return self.header.get("spacing_mm")


def read_dataset(path, verify: bool = True) -> list[PatchPair]:
    return list(PatchDataset(Path(path), verify=verify))

