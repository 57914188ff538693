"""Command-line pipeline: generate, build-dataset, train, predict, evaluate.

Every command reads one JSON config. ``--seed``, ``--out`` and the input
path flags override the matching config fields.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from .container import Container, ContainerWriter
from .dataset import (
    TRAIN_PLAN,
    VALIDATION_PLAN,
    Augmentation,
    AugmentationPolicy,
    DatasetManifest,
    FrameSample,
    PatchDataset,
    SplitPlan,
    encode_frame,
    frame_patch_pairs,
    sample_augmentation,
    write_dataset,
)
from .errors import ConfigError, FormatError, NumericError, ValidationError
from .flowfield import DEFAULT_SPACING_MM, FlowSpec, FluidMask, Grid3, VelocityField, frame_times, sample_frames
from .infer import (
    DEFAULT_PATCH,
    LR_VOLUME_ARRAYS,
    SR_VOLUME_ARRAYS,
    open_volumes,
    stack_arrays,
    upsample_full,
    volume_writer,
)
from .kspace import sinc_upsample
from .net import FlowNet, NetConfig, load_checkpoint
from .train import TrainConfig, train_loop

log = logging.getLogger("flow4dsr")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 1
FRAME_ARRAYS = ("vx", "vy", "vz", "mask")
TRAIN_TAG, VALIDATION_TAG = 0, 1


def derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


@dataclass
class SourceConfig:
    name: str
    flow: FlowSpec


@dataclass
class DatasetConfig:
    train_sources: list[str] | None = None
    validation_source: str | None = None
    patches_per_frame: int = TRAIN_PLAN.patches_per_frame
    validation_patches_per_frame: int = VALIDATION_PLAN.patches_per_frame
    rotate: bool = True
    min_fluid: float = 0.2
    n_unconstrained: int = 1


@dataclass
class PipelineConfig:
    seed: int = 0
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing_mm: tuple[float, float, float] = (DEFAULT_SPACING_MM,) * 3
    n_frames: int = 71
    sources: list[SourceConfig] = field(default_factory=list)
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    net_seed: int = 0
    patch_size: int = DEFAULT_PATCH
    infer_batch: int = 8
    paths: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid3:
        return Grid3(self.dims, self.spacing_mm)

    def source(self, name: str) -> tuple[int, SourceConfig]:
        for i, s in enumerate(self.sources):
            if s.name == name:
                return i, s
        raise ConfigError(f"unknown source {name!r}; configured: {[s.name for s in self.sources]}")


def _section(raw: dict, key: str, cls):
    d = raw.get(key, {})
    if not isinstance(d, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"config section {key!r}: {e}") from e


def parse_config(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {"seed", "grid", "n_frames", "sources", "policy", "dataset", "net", "train", "infer", "paths"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    grid = raw.get("grid", {})
    spacing = grid.get("spacing_mm", DEFAULT_SPACING_MM)
    spacing = (float(spacing),) * 3 if np.isscalar(spacing) else tuple(float(s) for s in spacing)
    sources = []
    for s in raw.get("sources", []):
        if "name" not in s:
            raise ConfigError("every source needs a name")
        sources.append(SourceConfig(str(s["name"]), FlowSpec.from_dict(s.get("flow", {}))))
    if len({s.name for s in sources}) != len(sources):
        raise ConfigError("source names must be unique")
    train = dict(raw.get("train", {}))
    train.setdefault("seed", int(raw.get("seed", 0)))
    infer = raw.get("infer", {})
    cfg = PipelineConfig(
        seed=int(raw.get("seed", 0)),
        dims=tuple(int(d) for d in grid.get("dims", (48, 48, 48))),
        spacing_mm=spacing,
        n_frames=int(raw.get("n_frames", 71)),
        sources=sources,
        policy=_section(raw, "policy", AugmentationPolicy),
        dataset=_section(raw, "dataset", DatasetConfig),
        net=_section({"net": {k: v for k, v in raw.get("net", {}).items() if k != "seed"}}, "net", NetConfig),
        train=_section({"train": train}, "train", TrainConfig),
        net_seed=int(raw.get("net", {}).get("seed", 0)),
        patch_size=int(infer.get("patch_size", DEFAULT_PATCH)),
        infer_batch=int(infer.get("batch", 8)),
        paths=dict(raw.get("paths", {})),
    )
    grid_obj = cfg.grid
    if any(d % 2 for d in grid_obj.dims):
        raise ConfigError(f"grid dims must be even for 2x downsampling, got {grid_obj.dims}")
    for s in cfg.sources:
        s.flow.validate(grid_obj)
    if cfg.n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    return cfg


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


def _path(flag, cfg: PipelineConfig, key: str, default=None) -> Path:
    value = flag if flag is not None else cfg.paths.get(key, default)
    if value is None:
        raise ConfigError(f"no path given for {key!r} (flag or config paths.{key})")
    return Path(value)


def _out_dir(path: Path) -> Path:
    if not path.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    path.mkdir(exist_ok=True)
    return path


# --- generate -----------------------------------------------------------------------

def source_policy(cfg: PipelineConfig, source_index: int) -> AugmentationPolicy:
    d = cfg.policy.to_dict()
    d["seed"] = derive_seed(cfg.seed, cfg.policy.seed, source_index)
    return AugmentationPolicy.from_dict(d)


def cmd_generate(cfg: PipelineConfig, args) -> int:
    if not cfg.sources:
        raise ConfigError("no sources configured")
    out = _path(args.out, cfg, "frames_dir")
    if not out.exists():
        raise FileNotFoundError(f"output directory does not exist: {out}")
    grid = cfg.grid
    for si, src in enumerate(cfg.sources):
        frames = sample_frames(src.flow, grid, cfg.n_frames)
        policy = source_policy(cfg, si)
        augs = [sample_augmentation(policy, v.max_abs_components(), i) for i, (v, _) in enumerate(frames)]
        header = {
            "kind": "frames",
            "source": src.name,
            "seed": cfg.seed,
            "flow": src.flow.to_dict(),
            "dims": list(grid.dims),
            "spacing_mm": list(grid.spacing),
            "frame_times_s": [float(t) for t in frame_times(src.flow.waveform, cfg.n_frames)],
            "intensity": [a.intensity for a in augs],
            "snr_db": [a.snr_db for a in augs],
            "noise_seeds": [derive_seed(cfg.seed, si, i, 7) for i in range(len(frames))],
            "policy": policy.to_dict(),
        }
        with ContainerWriter(out / f"{src.name}.f4d", [(n, grid.dims) for n in FRAME_ARRAYS], header) as w:
            for (v, m), a in zip(frames, augs):
                w.append({"vx": v.vx, "vy": v.vy, "vz": v.vz, "mask": m.inside}, [*a.venc, m.fraction])
        log.info("wrote %d frames of %s", len(frames), src.name)
    return EXIT_OK


# --- build-dataset --------------------------------------------------------------------

def read_frames(path) -> tuple[Container, Grid3]:
    c = Container(path)
    if c.header.get("kind") != "frames":
        raise FormatError(f"{path} is not a frame container")
    return c, Grid3(tuple(c.header["dims"]), tuple(c.header["spacing_mm"]))


def frame_sample(c: Container, grid: Grid3, i: int) -> FrameSample:
    rec = c[i]
    a = rec.arrays
    v = VelocityField(grid, *(a[k].astype(np.float64) for k in ("vx", "vy", "vz")))
    m = FluidMask(grid, a["mask"] > 0.5)
    h = c.header
    aug = Augmentation(rec.venc, float(h["intensity"][i]), float(h["snr_db"][i]))
    return FrameSample(v, m, aug, int(h["noise_seeds"][i]), f"{h['source']}[{i}]")


def split_sources(cfg: PipelineConfig) -> tuple[list[str], str]:
    names = [s.name for s in cfg.sources]
    if not names:
        raise ConfigError("no sources configured")
    held_out = cfg.dataset.validation_source or names[-1]
    cfg.source(held_out)
    train = cfg.dataset.train_sources
    if train is None:
        train = [n for n in names if n != held_out]
    if not train:
        raise ConfigError("empty training source list")
    for n in train:
        cfg.source(n)
    if held_out in train:
        raise ConfigError(f"source {held_out!r} cannot be both training and held out")
    return list(train), held_out


def split_pairs(cfg: PipelineConfig, frames_dir: Path, names: list[str], plan: SplitPlan, tag: int):
    d = cfg.dataset
    for name in names:
        si, _ = cfg.source(name)
        c, grid = read_frames(frames_dir / f"{name}.f4d")
        for i in range(len(c)):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, si, i, tag]))
            yield from frame_patch_pairs(frame_sample(c, grid, i), plan.patches_per_frame, rng,
                                         min_fluid=d.min_fluid, n_unconstrained=d.n_unconstrained,
                                         rotate=plan.rotations)


def cmd_build_dataset(cfg: PipelineConfig, args) -> int:
    train_names, held_out = split_sources(cfg)
    frames_dir = _path(args.frames, cfg, "frames_dir")
    for n in train_names + [held_out]:
        if not (frames_dir / f"{n}.f4d").exists():
            raise FileNotFoundError(f"missing frame container {frames_dir / f'{n}.f4d'}")
    out = _out_dir(_path(args.out, cfg, "dataset_dir"))
    d = cfg.dataset
    train_plan = SplitPlan(d.patches_per_frame, d.rotate)
    val_plan = SplitPlan(d.validation_patches_per_frame, d.rotate)
    _, grid = read_frames(frames_dir / f"{held_out}.f4d")
    spacing = grid.spacing
    m_train = write_dataset(split_pairs(cfg, frames_dir, train_names, train_plan, TRAIN_TAG), out / "train.f4d",
                            split="train", seed=cfg.seed, policy=cfg.policy, spacing_mm=spacing,
                            sources=train_names)
    m_val = write_dataset(split_pairs(cfg, frames_dir, [held_out], val_plan, VALIDATION_TAG), out / "val.f4d",
                          split="validation", seed=cfg.seed, policy=cfg.policy, spacing_mm=spacing,
                          sources=[held_out])
    c, grid = read_frames(frames_dir / f"{held_out}.f4d")
    lr_dims = tuple(n // 2 for n in grid.dims)
    header = {"source": held_out, "split": "test", "spacing_mm": [2 * s for s in grid.spacing],
              "truth": f"{held_out}.f4d", "flow_axis": c.header["flow"]["axis"]}
    with volume_writer(out / "test_lr.f4d", LR_VOLUME_ARRAYS, lr_dims, header) as w:
        for i in range(len(c)):
            f = frame_sample(c, grid, i)
            lr_v, lr_m = encode_frame(f.velocity, f.mask, f.aug, f.noise_seed)
            w.append(dict(zip(LR_VOLUME_ARRAYS, [*lr_v, *lr_m])), [*f.aug.venc, 0.0])
        n_test = w.count
    manifest = DatasetManifest(
        counts={"train": m_train.counts["train"], "validation": m_val.counts["validation"], "test": n_test},
        sources={"train": train_names, "validation": [held_out], "test": [held_out]},
        policy=cfg.policy.to_dict(),
    )
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("dataset counts %s", manifest.counts)
    return EXIT_OK


# --- train ----------------------------------------------------------------------------

def cmd_train(cfg: PipelineConfig, args) -> int:
    data = _path(args.data, cfg, "dataset_dir")
    out = _path(args.out, cfg, "run_dir")
    train = PatchDataset(data / "train.f4d")
    val = PatchDataset(data / "val.f4d")
    out = _out_dir(out)
    torch.manual_seed(cfg.train.seed)
    model = FlowNet(cfg.net, seed=cfg.net_seed)
    # derivatives in the gradient loss are taken per voxel of the HR patch
    hist = train_loop(train, val, model, cfg.train, out_dir=out)
    log.info("best validation error %.5f at iteration %s", hist.best_metric, hist.best_iteration)
    return EXIT_OK


# --- predict --------------------------------------------------------------------------

def cmd_predict(cfg: PipelineConfig, args) -> int:
    ckpt = _path(args.checkpoint, cfg, "checkpoint")
    src = _path(args.input, cfg, "lr_input")
    out = _path(args.out, cfg, "prediction")
    if not out.parent.exists():
        raise FileNotFoundError(f"output directory does not exist: {out.parent}")
    model, _ = load_checkpoint(ckpt)
    c = open_volumes(src)
    lr_dims = c.layout[0][1]
    header = {k: v for k, v in c.header.items() if k in ("source", "truth", "flow_axis")}
    header["split"] = "prediction"
    header["spacing_mm"] = [s / 2 for s in c.header.get("spacing_mm", [2 * DEFAULT_SPACING_MM] * 3)]
    with volume_writer(out, SR_VOLUME_ARRAYS, [2 * d for d in lr_dims], header) as w:
        for rec in c:
            vol = stack_arrays(rec.arrays, LR_VOLUME_ARRAYS)
            sr = upsample_full(vol[:3], vol[3:], rec.venc, model, n=cfg.patch_size, batch=cfg.infer_batch)
            w.append(dict(zip(SR_VOLUME_ARRAYS, sr.velocity)), rec.meta)
    return EXIT_OK


# --- evaluate -------------------------------------------------------------------------

BASELINES = {
    "trilinear": ev.upsample_trilinear_baseline,
    "tricubic": ev.upsample_tricubic_baseline,
    "sinc": sinc_upsample,
}


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    pred_path = _path(args.pred, cfg, "prediction")
    truth_path = _path(args.truth, cfg, "truth")
    lr_path = args.input if args.input is not None else cfg.paths.get("lr_input")
    pred = open_volumes(pred_path)
    truth, grid = read_frames(truth_path)
    lr = open_volumes(lr_path) if lr_path is not None else None
    if len(pred) != len(truth) or (lr is not None and len(lr) != len(truth)):
        raise ValidationError("prediction, truth and LR containers hold different frame counts")
    out = _out_dir(_path(args.out, cfg, "report_dir"))
    axis = truth.header["flow"]["axis"]
    rows = ["frame\tmethod\trel_speed_error\tdivergence_mean_abs\t" + "\t".join(
        f"flow_pct_{j}" for j in range(3))]
    for i in range(len(truth)):
        t = truth[i].arrays
        truth_v = stack_arrays(t, ("vx", "vy", "vz"))
        mask = t["mask"] > 0.5
        planes = ev.default_planes(mask, axis)
        preds = {"4dflownet": stack_arrays(pred[i].arrays, SR_VOLUME_ARRAYS)}
        if lr is not None:
            lr_v = stack_arrays(lr[i].arrays, LR_VOLUME_ARRAYS[:3])
            preds.update({k: np.real(f(lr_v)) for k, f in BASELINES.items()})
        reports = {}
        for method, p in preds.items():
            r = ev.evaluate_frame(p, truth_v, mask, planes, grid.spacing, frame=i, method=method,
                                  seed=derive_seed(cfg.seed, i))
            reports[method] = r.to_dict()
            pct = [f"{fr['percent_error']:.6f}" for fr in r.flow_rates] + [""] * (3 - len(r.flow_rates))
            rows.append(f"{i}\t{method}\t{r.rel_speed_error_mean:.8f}\t{r.divergence['mean_abs']:.8f}\t"
                        + "\t".join(pct))
        (out / f"frame_{i:03d}.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    (out / "summary.tsv").write_text("\n".join(rows) + "\n")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flow4dsr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON pipeline config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        if name == "build-dataset":
            s.add_argument("--frames", help="directory of generated frame containers")
        if name == "train":
            s.add_argument("--data", help="dataset directory with train.f4d and val.f4d")
        if name == "predict":
            s.add_argument("--checkpoint")
            s.add_argument("--input", help="LR volume container")
        if name == "evaluate":
            s.add_argument("--pred", help="SR volume container")
            s.add_argument("--truth", help="HR frame container")
            s.add_argument("--input", help="LR volume container for the interpolation baselines")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("FLOW4DSR_THREADS")
    try:
        if threads:
            torch.set_num_threads(int(threads))
        raw = load_config(args.config)
        if args.seed is not None:
            raw["seed"] = args.seed
            raw.setdefault("train", {})["seed"] = args.seed
        cfg = parse_config(raw)
        return COMMANDS[args.command](cfg, args)
    except ValidationError as e:
        print(f"flow4dsr {args.command}: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as e:
        print(f"flow4dsr {args.command}: data format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as e:
        print(f"flow4dsr {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"flow4dsr {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"flow4dsr {args.command}: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
