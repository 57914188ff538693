"""Acceptance suite: one recorded pass/fail line per criterion."""
import json
import math
import time

import numpy as np
import pytest
import torch
from scipy import stats

from flow4dsr.cli import main
from flow4dsr.dataset import (
    TRAIN_PLAN,
    VALIDATION_PLAN,
    Augmentation,
    AugmentationPolicy,
    FrameSample,
    frame_patch_pairs,
    rotate_scalar,
    rotate_vector,
    sample_augmentation,
)
from flow4dsr.evaluation import (
    PlaneSpec,
    compare_flow_rates,
    divergence_field,
    flow_rate,
    interior_mask,
    upsample_trilinear_baseline,
)
from flow4dsr.flowfield import FlowSpec, Grid3, generate_field, sample_frames
from flow4dsr.infer import plan_patches, predict_volume
from flow4dsr.kspace import (
    NoiseSpec,
    add_kspace_noise,
    downsample_with_noise,
    measure_snr_db,
    noise_sigma,
    signal_power,
    sinc_upsample,
    truncate_kspace,
)
from flow4dsr.mrencode import encode_phase, to_complex
from flow4dsr.net import FlowNet, NetConfig, anatomy_stack, parameter_gradients, upsample_trilinear2x
from flow4dsr.train import TrainConfig, dataset_rel_speed_error, loss_velocity_gradient, total_loss, train_loop


# --- noise model ----------------------------------------------------------------------

NOISE_HR = 160
NOISE_REGION = np.s_[16:64, 16:64, 16:64]  # 48^3 LR voxels, >= 32 HR voxels from the blob
NOISE_REGION_SIZE = 48**3
NOISE_SEEDS = 20


def blob_image(n=NOISE_HR, width=5.0):
    # smooth blob at the periodic origin so truncation leaks nothing into the region
    c = np.minimum(np.arange(n), n - np.arange(n)).astype(float)
    r2 = c[:, None, None] ** 2 + c[None, :, None] ** 2 + c[None, None, :] ** 2
    mag = 150.0 * np.exp(-r2 / (2 * width**2))
    return to_complex(encode_phase(0.4 * mag, 100.0), mag)


def test_noise_model(criterion):
    start = time.perf_counter()
    hr = blob_image()
    lr_ks = truncate_kspace(hr)
    m = lr_ks.size
    sigma = noise_sigma(signal_power(lr_ks), 15.0)
    # white k-space noise of power sigma^2 maps to per-voxel variance sigma^2 / M,
    # split evenly between the real and imaginary parts
    scale = sigma / math.sqrt(2 * m)
    leak = np.abs(downsample_with_noise(hr)[NOISE_REGION]).max()
    assert leak < 1e-3 * scale
    phases, mags, per_seed = [], [], []
    for seed in range(NOISE_SEEDS):
        lr = downsample_with_noise(hr, NoiseSpec(15.0, seed))[NOISE_REGION].ravel()
        phases.append(np.angle(lr))
        mags.append(np.abs(lr))
        per_seed.append(stats.rayleigh.fit(mags[-1], floc=0)[1] / scale)
    # one test per distribution on the samples pooled over the seeds
    p_phase = stats.kstest(np.concatenate(phases), stats.uniform(loc=-np.pi, scale=2 * np.pi).cdf).pvalue
    p_mag = stats.kstest(np.concatenate(mags), stats.rayleigh(scale=scale).cdf).pvalue
    elapsed = time.perf_counter() - start
    ok = p_phase > 0.01 and p_mag > 0.01 and elapsed < 60
    criterion("noise model", ok, f"{NOISE_SEEDS} seeds x {NOISE_REGION_SIZE} voxels: p_uniform_phase={p_phase:.3f} "
              f"p_rayleigh={p_mag:.3f}; fitted/theoretical scale per seed "
              + " ".join(f"{r:.4f}" for r in per_seed) + f"; {elapsed:.1f}s")
    assert ok
    assert all(abs(r - 1) < 0.01 for r in per_seed)


# --- SNR calibration ------------------------------------------------------------------

def test_snr_calibration(criterion):
    g = Grid3((48, 48, 48), (1.0, 1.0, 1.0))
    v, mask = generate_field(FlowSpec("helical_tube", "z", radius_mm=14.0, peak_speed_cm_s=80.0, swirl_ratio=0.3), g)
    image = to_complex(encode_phase(v.vz, 100.0), np.where(mask.inside, 150.0, 0.0))
    ks = truncate_kspace(image)
    worst = 0.0
    for target in (14.0, 15.0, 16.0, 17.0):
        for seed in range(10):
            noisy, _ = add_kspace_noise(ks, NoiseSpec(target, seed))
            worst = max(worst, abs(measure_snr_db(ks, noisy) - target))
    ok = worst <= 0.5
    criterion("SNR calibration", ok, f"max |measured - target| = {worst:.4f} dB over 4 targets x 10 seeds")
    assert ok


# --- k-space round trip ---------------------------------------------------------------

def test_kspace_round_trip(criterion):
    rng = np.random.default_rng(5)
    n = 32
    spectrum = np.zeros((n, n, n), complex)
    # random spectrum confined strictly inside the half-size band, Hermitian so the field is real
    k = np.fft.fftfreq(n, 1 / n)
    inside = (np.abs(k)[:, None, None] < n // 4) & (np.abs(k)[None, :, None] < n // 4) & (np.abs(k)[None, None, :] < n // 4)
    spectrum[inside] = rng.normal(size=inside.sum()) + 1j * rng.normal(size=inside.sum())
    field = np.fft.ifftn(spectrum).real
    assert np.allclose(np.fft.fftn(field)[~inside], 0, atol=1e-9)
    rec = sinc_upsample(downsample_with_noise(field).real)
    rel = np.max(np.abs(rec - field)) / np.max(np.abs(field))
    const_down = downsample_with_noise(np.full((n, n, n), 2.75))
    const_up = sinc_upsample(np.full((n // 2,) * 3, 2.75))
    const_err = max(np.abs(const_down - 2.75).max(), np.abs(const_up - 2.75).max())
    ok = rel < 1e-6 and const_err < 1e-12
    criterion("k-space round trip", ok, f"relative error {rel:.2e}; constant error {const_err:.1e}")
    assert ok


# --- gradient correctness -------------------------------------------------------------

class ActivationPattern:
    """Records the sign of every ReLU / leaky ReLU input during a forward pass."""

    def __init__(self, monkeypatch):
        self.signs = []
        relu, leaky = torch.nn.functional.relu, torch.nn.functional.leaky_relu

        def rec_relu(x, *a, **k):
            self.signs.append(x.detach() > 0)
            return relu(x, *a, **k)

        def rec_leaky(x, *a, **k):
            self.signs.append(x.detach() > 0)
            return leaky(x, *a, **k)

        monkeypatch.setattr(torch.nn.functional, "relu", rec_relu)
        monkeypatch.setattr(torch.nn.functional, "leaky_relu", rec_leaky)

    def run(self, fn):
        self.signs = []
        value = float(fn().detach())
        return value, self.signs


def _fd_check(model, loss_fn, pattern, rng, per_tensor=3, steps=(1e-4, 1e-5, 1e-6, 1e-7), max_draws=50):
    """Worst relative gap between analytic and central-difference gradients.

    Each coordinate uses the largest step that keeps every activation on the
    same side of its kink, so the loss is smooth across the stencil. Coordinates
    where even the smallest step crosses a kink are skipped.
    """
    params = dict(model.named_parameters())
    grads = parameter_gradients(loss_fn(), model)
    _, base = pattern.run(loss_fn)
    worst, scored, skipped = 0.0, 0, 0

    def central(p, idx, eps):
        old = float(p.detach()[idx])
        with torch.no_grad():
            p[idx] = old + eps
            plus, sp = pattern.run(loss_fn)
            p[idx] = old - eps
            minus, sm = pattern.run(loss_fn)
            p[idx] = old
        smooth = all(torch.equal(a, b) and torch.equal(a, c) for a, b, c in zip(base, sp, sm))
        return (plus - minus) / (2 * eps), smooth

    for name, p in params.items():
        done, wanted = 0, min(per_tensor, p.numel())
        for i in rng.permutation(p.numel())[:max_draws]:
            if done == wanted:
                break
            idx = np.unravel_index(int(i), tuple(p.shape))
            for eps in steps:
                fd, smooth = central(p, idx, eps)
                if smooth:
                    break
            if not smooth:
                skipped += 1
                continue
            a = float(grads[name][idx])
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-300))
            done += 1
        assert done == wanted, f"no differentiable coordinates found in {name}"
        scored += done
    return worst, scored, skipped


def test_gradient_correctness(criterion, monkeypatch):
    rng = np.random.default_rng(11)
    model = FlowNet(NetConfig(base_filters=4), seed=3).double()
    pattern = ActivationPattern(monkeypatch)
    vel = rng.uniform(-0.8, 0.8, size=(2, 3, 8, 8, 8))
    mags = rng.uniform(0.1, 0.9, size=(2, 3, 8, 8, 8))
    v = torch.from_numpy(vel)
    a = torch.from_numpy(anatomy_stack(mags, vel, axis=1))
    target = torch.from_numpy(rng.uniform(-0.8, 0.8, size=(2, 3, 16, 16, 16)))
    total, n1, s1 = _fd_check(model, lambda: total_loss(model(v, a), target).l_total, pattern, rng)
    vg, n2, s2 = _fd_check(model, lambda: loss_velocity_gradient(model(v, a), target), pattern, rng)
    ok = total < 1e-3 and vg < 1e-4
    criterion("gradient correctness", ok, f"l_total worst rel {total:.2e} over {n1} coordinates; "
              f"l_VG worst rel {vg:.2e} over {n2}; {s1 + s2} kink-crossing draws skipped")
    assert ok


# --- architecture contracts -----------------------------------------------------------

def test_architecture_contracts(criterion):
    model = FlowNet(NetConfig(), seed=0)
    rng = np.random.default_rng(2)
    shapes, bound = {}, 0.0
    with torch.no_grad():
        for n in (16, 8, 24):
            # inputs span the normalised domain: velocity / venc in [-1, 1], magnitude / 255 in [0, 1]
            vel = rng.uniform(-1, 1, size=(2, 3, n, n, n))
            vel[1] = np.sign(vel[1])
            mags = rng.uniform(0, 1, size=(2, 3, n, n, n))
            v = torch.from_numpy(vel.astype(np.float32))
            a = torch.from_numpy(anatomy_stack(mags, vel, axis=1).astype(np.float32))
            out = model(v, a)
            shapes[n] = tuple(out.shape)
            bound = max(bound, float(out.abs().max()))
    ok = all(shapes[n] == (2, 3, 2 * n, 2 * n, 2 * n) for n in shapes) and bound < 1.0
    criterion("architecture contracts", ok, f"shapes {shapes}; max |out| {bound:.6f}")
    assert ok


# --- overfit smoke test ---------------------------------------------------------------

@pytest.mark.slow
def test_overfit_smoke(criterion):
    g = Grid3((48, 48, 48), (1.0, 1.0, 1.0))
    spec = FlowSpec("helical_tube", "z", radius_mm=14.0, peak_speed_cm_s=80.0, swirl_ratio=0.3)
    frames = sample_frames(spec, g, 71)
    pairs = []
    rng = np.random.default_rng(0)
    for i in (10, 20, 30, 40, 50):
        v, mask = frames[i]
        sample = FrameSample(v, mask, Augmentation((100.0, 100.0, 100.0), 150.0, 16.0), noise_seed=i, frame_id=str(i))
        pairs.extend(frame_patch_pairs(sample, 1, rng))
    assert len(pairs) == 50

    errors = {}

    def evaluate(model, val):
        # scored on the training patches after the first and the last step only
        it = len(errors_seen) + 1
        errors_seen.append(it)
        if it in (1, 500):
            errors[it] = dataset_rel_speed_error(model, val)
            return errors[it]
        return math.inf

    errors_seen = []
    config = TrainConfig(lr0=1e-4, batch=20, max_iters=500, val_every=1, seed=0)
    model = FlowNet(NetConfig(base_filters=16), seed=0)
    start = time.perf_counter()
    history = train_loop(pairs, pairs, model, config, evaluate=evaluate)
    elapsed = time.perf_counter() - start
    losses = np.array([s.l_total for s in history.steps])
    blocks = losses.reshape(10, 50).mean(axis=1)
    drop = errors[500] / errors[1]
    monotone = bool(np.all(np.diff(blocks) <= 0))
    ok_drop, ok_time = drop < 0.5, elapsed < 30 * 60
    criterion("overfit: error drop", ok_drop, f"error {errors[1]:.4f} -> {errors[500]:.4f} (ratio {drop:.3f})")
    criterion("overfit: smoothed loss monotone", monotone,
              "50-step means " + " ".join(f"{b:.4g}" for b in blocks))
    criterion("overfit: runtime", ok_time, f"{elapsed / 60:.1f} min for 500 iterations "
              f"({elapsed / 500:.2f} s/iteration, {torch.get_num_threads()} thread)")
    assert ok_drop and monotone
    assert ok_time


# --- stitcher oracle ------------------------------------------------------------------

def test_stitcher_oracle(criterion):
    rng = np.random.default_rng(4)
    lr = rng.uniform(-1, 1, size=(3, 32, 32, 32))
    mags = rng.uniform(0, 1, size=lr.shape)

    def trilinear(v, m):
        with torch.no_grad():
            return upsample_trilinear2x(torch.from_numpy(v)).numpy()

    plan = plan_patches(lr.shape[1:], 16)
    out = predict_volume(lr, mags, trilinear, plan, batch=16)
    whole = upsample_trilinear_baseline(lr)
    equal = np.isclose(out.velocity, whole, rtol=0, atol=1e-12).all(axis=0)
    counts = np.bincount(out.provenance.ravel(), minlength=len(plan.origins))
    covered = out.provenance.min() >= 0 and counts.sum() == 64**3
    ok = out.velocity.shape == (3, 64, 64, 64) and plan.stride == 12 and equal.all() and covered
    criterion("stitcher oracle", ok, f"{equal.mean():.2%} of voxels match; {len(plan.origins)} patches, "
              f"stride {plan.stride}")
    assert ok


# --- dataset arithmetic ---------------------------------------------------------------

def test_dataset_arithmetic(criterion):
    g = Grid3((40, 40, 40), (1.0, 1.0, 1.0))
    specs = [FlowSpec("poiseuille_tube", "x", radius_mm=12.0), FlowSpec("stenosed_tube", "y", radius_mm=12.0,
                                                                          stenosis_factor=0.6)]
    held_out = FlowSpec("helical_tube", "z", radius_mm=12.0, swirl_ratio=0.3)
    policy = AugmentationPolicy(seed=5)

    def count(spec, plan):
        rng = np.random.default_rng(0)
        total = 0
        for i, (v, m) in enumerate(sample_frames(spec, g, 71)):
            aug = sample_augmentation(policy, v.max_abs_components(), i)
            for _ in frame_patch_pairs(FrameSample(v, m, aug, i, str(i)), plan.patches_per_frame, rng,
                                       rotate=plan.rotations):
                total += 1
        return total

    per_source = [count(s, TRAIN_PLAN) for s in specs]
    val = count(held_out, VALIDATION_PLAN)
    ok = per_source == [7100, 7100] and sum(per_source) == 14200 and val == 710
    ok = ok and TRAIN_PLAN.count(71) == 7100 and TRAIN_PLAN.count(71, 2) == 14200 and VALIDATION_PLAN.count(71) == 710
    criterion("dataset arithmetic", ok, f"per source {per_source}; train {sum(per_source)}; validation {val}")
    assert ok


# --- metric golden values -------------------------------------------------------------

def test_metric_golden_values(criterion):
    rows = {"inlet": (111.6, 110.9, "-0.7 (-0.6%)"), "bifurcation": (135.2, 139.7, "4.5 (3.3%)"),
            "outlet": (126.8, 134.1, "7.3 (5.8%)")}
    got = {k: compare_flow_rates(t, p).formatted() for k, (t, p, _) in rows.items()}
    ok = all(got[k] == rows[k][2] for k in rows)
    criterion("metric golden values", ok, ", ".join(f"{k} {v}" for k, v in got.items()))
    assert ok


# --- physics metrics ------------------------------------------------------------------

def test_physics_metrics(criterion):
    g = Grid3((16, 96, 96), (1.0, 0.25, 0.25))
    v, _ = generate_field(FlowSpec("poiseuille_tube", "x", radius_mm=10.0, peak_speed_cm_s=100.0), g)
    expected = math.pi * 1.0**2 * 100.0 / 2.0
    q_err = abs(flow_rate(v, PlaneSpec("x", 8)) - expected) / expected

    g = Grid3((32, 32, 32), (0.5, 0.5, 0.5))
    div_max = 0.0
    for spec in (FlowSpec("poiseuille_tube", "y", radius_mm=6.0),
                 FlowSpec("helical_tube", "z", radius_mm=6.0, swirl_ratio=0.4)):
        v, m = generate_field(spec, g)
        div_max = max(div_max, float(np.abs(divergence_field(v, m.inside)[interior_mask(m.inside)]).max()))
    v, m = generate_field(FlowSpec("stenosed_tube", "x", radius_mm=7.0, peak_speed_cm_s=60.0,
                                   stenosis_factor=0.7), g)
    # the tapered tube is solenoidal analytically; central differences leave an O(h^2) residue
    sten = float(np.abs(divergence_field(v, m.inside)[interior_mask(m.inside)]).max()) / (60.0 / 0.5)

    rng = np.random.default_rng(9)
    field = rng.normal(size=(3, 9, 9, 9))
    mask = rng.uniform(size=(9, 9, 9)) > 0.2
    equi = 0.0
    for axis in "xyz":
        for angle in (90, 180, 270):
            a = divergence_field(rotate_vector(field, axis, angle), rotate_scalar(mask, axis, angle))
            b = rotate_scalar(divergence_field(field, mask), axis, angle)
            equi = max(equi, float(np.abs(a - b).max()))
    ok = q_err < 0.02 and div_max < 1e-9 and sten < 0.02 and equi < 1e-10
    criterion("physics metrics", ok, f"Poiseuille flow error {q_err:.3%}; solenoidal |div| {div_max:.1e}; "
              f"stenosis |div|/(v/h) {sten:.1e}; rotation equivariance {equi:.1e}")
    assert ok


# --- determinism ----------------------------------------------------------------------

def test_determinism(criterion, tmp_path):
    def run(root):
        (root / "frames").mkdir(parents=True)
        cfg = {
            "seed": 21, "grid": {"dims": [32, 32, 32]}, "n_frames": 2,
            "sources": [{"name": "a", "flow": {"radius_mm": 6}},
                        {"name": "b", "flow": {"kind": "stenosed_tube", "radius_mm": 6, "axis": "z"}}],
            "dataset": {"patches_per_frame": 1},
            "net": {"base_filters": 4, "lr_resblocks": 1, "hr_resblocks": 1},
            "train": {"max_iters": 3, "batch": 4, "val_every": 1},
            "paths": {"frames_dir": str(root / "frames"), "dataset_dir": str(root / "data"),
                      "run_dir": str(root / "run")},
        }
        (root / "cfg.json").write_text(json.dumps(cfg))
        return [main([cmd, "--config", str(root / "cfg.json")]) for cmd in ("generate", "build-dataset", "train")]

    codes = run(tmp_path / "one") + run(tmp_path / "two")
    files = sorted(p.relative_to(tmp_path / "one") for p in (tmp_path / "one").rglob("*")
                   if p.is_file() and p.name != "cfg.json")
    differ = [str(f) for f in files if (tmp_path / "one" / f).read_bytes() != (tmp_path / "two" / f).read_bytes()]
    ok = codes == [0] * 6 and len(files) >= 8 and not differ
    criterion("determinism", ok, f"{len(files)} artifacts compared, {len(differ)} differ {differ}")
    assert ok
