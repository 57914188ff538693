"""Whole-volume super-resolution from overlapping patches."""
from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .container import Container, ContainerWriter
from .dataset import MAGNITUDE_SCALE
from .errors import ValidationError
from .net import MIN_PATCH, FlowNet, anatomy_stack

log = logging.getLogger(__name__)

STRIP = 4
DEFAULT_PATCH = 32

# (velocity batch, magnitude batch) -> SR velocity batch, all normalised
Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def axis_origins(dim: int, n: int) -> list[int]:
    stride = n - 4
    return list(range(0, dim - n, stride)) + [dim - n]


@dataclass(frozen=True)
class PatchPlan:
    lr_dims: tuple[int, int, int]
    n: int
    axis_origins: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]
    strip: int = STRIP

    @property
    def stride(self) -> int:
        return self.n - 4

    @property
    def origins(self) -> list[tuple[int, int, int]]:
        return list(itertools.product(*self.axis_origins))

    @property
    def sr_dims(self) -> tuple[int, int, int]:
        return tuple(2 * d for d in self.lr_dims)

    def owned_intervals(self, axis: int) -> list[tuple[int, int]]:
        """SR index range each origin along ``axis`` contributes.

        Patch borders are stripped except on faces lying on the volume
        boundary. Where retained ranges overlap, the later patch wins.
        """
        origins = self.axis_origins[axis]
        size = 2 * self.lr_dims[axis]
        k = len(origins) - 1
        lo = [0 if i == 0 else 2 * o + self.strip for i, o in enumerate(origins)]
        hi = [size if i == k else 2 * o + 2 * self.n - self.strip for i, o in enumerate(origins)]
        out = []
        for i in range(k + 1):
            end = hi[i] if i == k else min(hi[i], lo[i + 1])
            out.append((lo[i], end))
        for (_, a), (b, _) in zip(out, out[1:]):
            if a != b:
                raise AssertionError(f"axis {axis}: retained SR ranges leave a gap at {a}..{b}")
        if out[0][0] != 0 or out[-1][1] != size:
            raise AssertionError(f"axis {axis}: retained SR ranges do not span [0, {size})")
        return out


def plan_patches(lr_dims: Sequence[int], n: int) -> PatchPlan:
    dims = tuple(int(d) for d in lr_dims)
    if len(dims) != 3:
        raise ValidationError(f"expected 3 LR dims, got {dims}")
    if n < MIN_PATCH:
        raise ValidationError(f"patch size {n} below minimum {MIN_PATCH}")
    if min(dims) < n:
        raise ValidationError(f"LR volume {dims} smaller than patch size {n}")
    return PatchPlan(dims, n, tuple(tuple(axis_origins(d, n)) for d in dims))


@dataclass
class StitchedVolume:
    velocity: np.ndarray    # (3, 2X, 2Y, 2Z), cm/s
    provenance: np.ndarray  # (2X, 2Y, 2Z) index into plan.origins
    elapsed_s: float = 0.0


def predict_volume(lr_velocity: np.ndarray, lr_mags: np.ndarray, predictor: Predictor, plan: PatchPlan, *,
                   venc_max: float = 1.0, batch: int = 8) -> StitchedVolume:
    """Run ``predictor`` over every planned patch and stitch the retained regions.

    Inputs are normalised; the result is multiplied back by ``venc_max``.
    """
    lr_velocity = np.asarray(lr_velocity)
    lr_mags = np.asarray(lr_mags)
    if lr_velocity.shape != (3, *plan.lr_dims) or lr_mags.shape != lr_velocity.shape:
        raise ValidationError(f"inputs {lr_velocity.shape}/{lr_mags.shape} do not match plan dims {plan.lr_dims}")
    n = plan.n
    owned = [plan.owned_intervals(a) for a in range(3)]
    index = {o: i for i, o in enumerate(plan.origins)}
    out = np.zeros((3, *plan.sr_dims), dtype=np.float64)
    provenance = np.full(plan.sr_dims, -1, dtype=np.int32)
    hits = np.zeros(plan.sr_dims, dtype=np.int32)
    jobs = list(itertools.product(*(range(len(o)) for o in plan.axis_origins)))
    for start in range(0, len(jobs), batch):
        chunk = jobs[start:start + batch]
        origins = [tuple(plan.axis_origins[a][ij[a]] for a in range(3)) for ij in chunk]
        sl = [tuple(slice(o, o + n) for o in org) for org in origins]
        v = np.stack([lr_velocity[(slice(None), *s)] for s in sl])
        m = np.stack([lr_mags[(slice(None), *s)] for s in sl])
        sr = np.asarray(predictor(v, m))
        if sr.shape != (len(chunk), 3, 2 * n, 2 * n, 2 * n):
            raise ValidationError(f"predictor returned {sr.shape} for {len(chunk)} patches of size {n}")
        for ij, org, patch in zip(chunk, origins, sr):
            dst = tuple(slice(*owned[a][ij[a]]) for a in range(3))
            src = tuple(slice(owned[a][ij[a]][0] - 2 * org[a], owned[a][ij[a]][1] - 2 * org[a]) for a in range(3))
            out[(slice(None), *dst)] = patch[(slice(None), *src)]
            provenance[dst] = index[org]
            hits[dst] += 1
    if not np.all(hits == 1):
        raise AssertionError(f"stitching assigned {int((hits == 0).sum())} voxels zero times "
                             f"and {int((hits > 1).sum())} more than once")
    return StitchedVolume(out * venc_max, provenance)


def net_predictor(model: FlowNet) -> Predictor:
    model.eval()

    def run(v: np.ndarray, m: np.ndarray) -> np.ndarray:
        anat = anatomy_stack(m.astype(np.float64), v.astype(np.float64), axis=1)
        with torch.no_grad():
            sr = model(torch.from_numpy(v.astype(np.float32)), torch.from_numpy(anat.astype(np.float32)))
        return sr.double().numpy()

    return run


def normalize_inputs(lr_velocity, lr_mags, venc) -> tuple[np.ndarray, np.ndarray, float]:
    vmax = max(float(v) for v in venc)
    if not vmax > 0:
        raise ValidationError("VENC must be positive")
    v = np.asarray(lr_velocity, dtype=np.float64) / vmax
    m = np.clip(np.asarray(lr_mags, dtype=np.float64) / MAGNITUDE_SCALE, 0.0, 1.0)
    return v, m, vmax


def upsample_full(lr_velocity, lr_mags, venc, model: FlowNet, *, n: int = DEFAULT_PATCH,
                  batch: int = 8) -> StitchedVolume:
    """LR velocity (cm/s) and raw magnitudes to an SR velocity volume (cm/s)."""
    v, m, vmax = normalize_inputs(lr_velocity, lr_mags, venc)
    n = min(n, *v.shape[1:])
    t0 = time.perf_counter()
    result = predict_volume(v, m, net_predictor(model), plan_patches(v.shape[1:], n), venc_max=vmax, batch=batch)
    result.elapsed_s = time.perf_counter() - t0
    log.info("super-resolved %s -> %s in %.2f s", v.shape[1:], result.velocity.shape[1:], result.elapsed_s)
    return result


# --- volume containers -------------------------------------------------------------

LR_VOLUME_ARRAYS = ("vx", "vy", "vz", "mx", "my", "mz")
SR_VOLUME_ARRAYS = ("vx", "vy", "vz")


def volume_writer(path, names: Sequence[str], dims: Sequence[int], header: dict | None = None) -> ContainerWriter:
    h = dict(header or {})
    h["kind"] = "volume"
    return ContainerWriter(path, [(name, tuple(dims)) for name in names], h)


def open_volumes(path, verify: bool = True) -> Container:
    c = Container(path, verify=verify)
    if c.header.get("kind") != "volume":
        raise ValidationError(f"{path} is not a volume container")
    return c


def stack_arrays(arrays: dict, names: Sequence[str]) -> np.ndarray:
    return np.stack([np.asarray(arrays[k], dtype=np.float64) for k in names])
