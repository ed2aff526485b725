"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest
import torch

from canopysr.config import RunConfig
from canopysr.datamodel import PointCloudSample, rasterize_p95
from canopysr.datapipe import SamplerConfig, compute_channel_stats, make_sample, pad_series
from canopysr.losses import LossConfig, patch_balanced_mae, total_loss, wgdl
from canopysr.metrics import basic_metrics, bin_errors, fap
from canopysr.model import CanopyHeightNet, ModelConfig, crop_margin
from canopysr.predict import bicubic_upsample, block_downsample, predict_patch
from canopysr.superres import SRConfig, SRUpsampler, pixel_shuffle, pixel_unshuffle
from canopysr.synthetic import SynthConfig, generate_synthetic
from canopysr.trainer import lr_schedule

from conftest import tiny_model_config
from test_datamodel import brute_p95
from test_metrics import gaussian_blur, literal_metrics, sort_quartiles


@pytest.fixture
def verdict(capsys):
    def emit(label: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        assert ok, f"{label}: {detail}"
    return emit


# ------------------------------------------------------------------ 1

def _mask(rng, shape=(2, 12, 12), masked=0.35):
    """Exactly ``ceil(masked * H * W)`` invalid pixels per patch."""
    per = shape[1] * shape[2]
    k = int(np.ceil(masked * per))
    return np.stack([rng.permutation(per) >= k for _ in range(shape[0])]).reshape(shape)


def _relative_errors(fn, x, h=1e-5):
    """Worst elementwise relative error of the analytic gradient against central differences.

    Where the analytic gradient is exactly zero (exact cancellation of
    piecewise-linear terms) relative error is undefined; there the
    difference quotient must stay within its own rounding bound instead.
    Returns ``(worst_relative, zero_count, zero_violations)``.
    """
    eps = np.finfo(np.float64).eps
    x = x.clone().requires_grad_()
    fn(x).backward()
    analytic = x.grad.numpy().ravel()
    base = x.detach().numpy()
    worst, zeros, violations = 0.0, 0, 0
    for k in range(base.size):
        xp, xm = base.copy().ravel(), base.copy().ravel()
        xp[k] += h
        xm[k] -= h
        fp = fn(torch.from_numpy(xp.reshape(base.shape))).item()
        fm = fn(torch.from_numpy(xm.reshape(base.shape))).item()
        numeric = (fp - fm) / (2 * h)
        if analytic[k] == 0.0:
            zeros += 1
            violations += abs(numeric) > 4 * eps * (abs(fp) + abs(fm)) / (2 * h)
            continue
        worst = max(worst, abs(numeric - analytic[k]) / max(abs(numeric), abs(analytic[k])))
    return worst, zeros, violations


def test_c01_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst, zeros, violations = {}, 0, 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        y = torch.tensor(rng.uniform(2, 30, (2, 12, 12)))
        x = y + torch.tensor(rng.normal(0, 2, (2, 12, 12)))
        valid = torch.tensor(_mask(rng))
        fns = {"mae": lambda p: patch_balanced_mae(p, y, valid),
               "total": lambda p: total_loss(p, y, valid)[0]}
        for lam in (0.1, 1.0):
            for e in (1, 2):
                fns[f"wgdl(l={lam},p={e})"] = lambda p, lam=lam, e=e: wgdl(p, y, valid, lam, e)
        for name, fn in fns.items():
            rel, z, v = _relative_errors(fn, x)
            worst[name] = max(worst.get(name, 0.0), rel)
            zeros += z
            violations += v
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    verdict("C1 gradient correctness", top < 1e-4 and violations == 0 and elapsed < 60,
            f"max relative error {top:.2e} over {len(worst)} losses x 20 batches; "
            f"{zeros} exact-zero gradients, {violations} outside rounding bound; {elapsed:.1f} s")


# ------------------------------------------------------------------ 2

def test_c02_masking_exactness(verdict):
    rng = np.random.default_rng(2)
    changes = []
    for _ in range(100):
        y = rng.uniform(2, 30, (2, 12, 12))
        x = y + rng.normal(0, 2, y.shape)
        valid = _mask(rng)
        v = torch.tensor(valid)
        base = total_loss(torch.tensor(x), torch.tensor(y), v)[0].item()
        b, i, j = np.argwhere(~valid)[rng.integers((~valid).sum())]
        x2, y2 = x.copy(), y.copy()
        x2[b, i, j] += rng.normal(0, 100)
        y2[b, i, j] = rng.uniform(0, 100)
        other = total_loss(torch.tensor(x2), torch.tensor(y2), v)[0].item()
        changes.append(abs(other - base))
    verdict("C2 masking exactness", max(changes) == 0.0, f"max change {max(changes)} over 100 trials")


# ------------------------------------------------------------------ 3

def test_c03_attention_invariants(verdict):
    torch.manual_seed(0)
    model = CanopyHeightNet(tiny_model_config(2.5), seed=0).double().eval()
    rng = np.random.default_rng(3)
    images = torch.tensor(rng.standard_normal((1, 6, 17, 10, 10)))
    offsets = torch.tensor(np.sort(rng.choice(np.arange(120, 300), 6, replace=False)))[None]
    lidar = torch.tensor([15])
    with torch.no_grad():
        feats = model.backbone(images)
        fused, attn = model.temporal(feats, model.encode_dates(offsets.double()), model.encode_dates(lidar.double()))
        heights = model(images, offsets, lidar)

        garbage = torch.tensor(rng.standard_normal((1, 3, 17, 10, 10))) * 1e3
        images_p = torch.cat([images, garbage], 1)
        offsets_p = torch.cat([offsets, torch.tensor([[5, 200, 360]])], 1)
        pad = torch.tensor([[False] * 6 + [True] * 3])
        feats_p = model.backbone(images_p)
        fused_p, attn_p = model.temporal(feats_p, model.encode_dates(offsets_p.double()),
                                         model.encode_dates(lidar.double()), pad)
        heights_p = model(images_p, offsets_p, lidar, pad)

        perm = torch.tensor([3, 0, 5, 1, 4, 2])
        heights_perm = model(images[:, perm], offsets[:, perm], lidar)
        fused_perm, _ = model.temporal(feats[:, perm], model.encode_dates(offsets[:, perm].double()),
                                       model.encode_dates(lidar.double()))

    sums = max((attn.sum(2) - 1).abs().max().item(), (attn_p.sum(2) - 1).abs().max().item())
    padded = attn_p[:, :, 6:].abs().max().item()
    pad_diff = max((fused_p - fused).abs().max().item(), (heights_p - heights).abs().max().item())
    perm_diff = max((fused_perm - fused).abs().max().item(), (heights_perm - heights).abs().max().item())
    ok = sums <= 1e-6 and padded == 0.0 and pad_diff <= 1e-6 and perm_diff <= 1e-6
    verdict("C3 attention invariants", ok,
            f"sum dev {sums:.1e}, padded weight {padded}, padding diff {pad_diff:.1e}, permutation diff {perm_diff:.1e}")


# ------------------------------------------------------------------ 4

def test_c04_pixel_shuffle_bijection(verdict):
    rng = np.random.default_rng(4)
    exact = True
    for _ in range(20):
        for r in (2, 4):
            c, h, w = int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
            x = torch.tensor(rng.standard_normal((int(rng.integers(1, 3)), c * r * r, h, w)))
            y = torch.tensor(rng.standard_normal((c, h * r, w * r)))
            exact &= torch.equal(pixel_unshuffle(pixel_shuffle(x, r), r), x)
            exact &= torch.equal(pixel_shuffle(pixel_unshuffle(y, r), r), y)
    verdict("C4 pixel-shuffle bijection", bool(exact), "40 random shapes per factor, exact round trips")


# ------------------------------------------------------------------ 5

def test_c05_checkerboard_free_init(verdict):
    worst = 0.0
    for r in (2, 4):
        torch.manual_seed(r)
        up = SRUpsampler(SRConfig(r, 64, init_noise_scale=0.0)).eval()
        for k in range(10):
            x = torch.randn(1, 64, 8, 8, generator=torch.Generator().manual_seed(k))
            with torch.no_grad():
                y = up(x).double()
            blocks = y.reshape(1, 64, 8, r, 8, r)
            ref = blocks[:, :, :, :1, :, :1]
            rel = ((blocks - ref).abs().max() / ref.abs().max().clamp_min(1e-30)).item()
            worst = max(worst, rel)
    verdict("C5 checkerboard-free init", worst <= 1e-6, f"max within-block relative spread {worst:.1e} (r=2,4)")


# ------------------------------------------------------------------ 6

OVERFIT_SCENE = SynthConfig(size=32, ref_margin=4, target_resolution=2.5, fine_resolution=1.25, crown_scale=3.0,
                            crown_density=20.0, n_dates=(6, 8), cloud_probability=0.0, crop_probability=0.0)


@pytest.mark.slow
def test_c06_overfit(verdict):
    torch.manual_seed(0)
    items = [generate_synthetic(OVERFIT_SCENE, np.random.default_rng(s)) for s in np.random.SeedSequence(1).spawn(8)]
    stats = compute_channel_stats([p.bands for p, _ in items])
    sampler = SamplerConfig(window=12, margin=4, t_max=6)
    batch = pad_series([make_sample(p, r, stats, sampler, "val", factor=4) for p, r in items])
    cfg = ModelConfig.for_resolution(2.5, n_blocks=2, layers_per_block=3, growth=16, feat_dim=32, heads=4,
                                     head_dim=8, fused_dim=32, mlp_layers=(32, 64, 32))
    model = CanopyHeightNet(cfg, seed=0)
    opt = torch.optim.Adam(model.parameters(), lr=2e-3)
    steps, lr0 = 2000, 2e-3

    def masked_mae():
        with torch.no_grad():
            pred = crop_margin(model(batch["images"], batch["s2_offsets"], batch["lidar_offset"],
                                     batch["pad_mask"]), sampler.margin * 4)[:, 0]
            return patch_balanced_mae(pred, batch["target"], batch["valid"]).item()

    t0 = time.perf_counter()
    mae, reached = masked_mae(), None
    for step in range(steps):
        for group in opt.param_groups:
            group["lr"] = lr_schedule(step, steps, 1, lr0, 0.25)
        pred = crop_margin(model(batch["images"], batch["s2_offsets"], batch["lidar_offset"], batch["pad_mask"]),
                           sampler.margin * 4)[:, 0]
        loss, _ = total_loss(pred, batch["target"], batch["valid"], LossConfig())
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % 50 == 0:
            mae = masked_mae()
            if mae < 0.5:
                reached = step + 1
                break
    elapsed = time.perf_counter() - t0
    verdict("C6 overfit demonstration", reached is not None and elapsed < 20 * 60,
            f"training masked MAE {mae:.3f} m after {reached or steps} steps in {elapsed / 60:.1f} min")


# ------------------------------------------------------------------ 7

def test_c07_oracle_equivalence(verdict):
    rng = np.random.default_rng(7)
    y = rng.uniform(1.5, 45, 10_000)
    p = y + rng.normal(0, 3, y.size)
    got = basic_metrics(p, y)
    want = literal_metrics(p.tolist(), y.tolist())
    metric_err = max(abs(a - b) for a, b in zip([got.mae, got.rmse, got.r2, got.rmae], want))
    bin_err = 0.0
    for b in bin_errors(p, y):
        sel = [float(e) for e, t in zip(p - y, y) if b.lo <= t < b.hi]
        bin_err = max(bin_err, *(abs(u - v) for u, v in zip((b.q1, b.median, b.q3), sort_quartiles(sel))))
    p95_exact = True
    for seed in range(10):
        r = np.random.default_rng(70 + seed)
        n, res = int(r.integers(200, 5000)), float(r.choice([1.0, 2.5]))
        extent = (0.0, 0.0, 10 * res, 8 * res)
        pts = np.column_stack([r.uniform(-2, extent[2] + 2, n), r.uniform(-2, extent[3] + 2, n), r.gamma(2.0, 6.0, n)])
        classes = r.choice(4, size=n, p=[0.7, 0.1, 0.1, 0.1])
        oracle = brute_p95(pts, classes, res, extent)
        oracle[oracle < 1.5] = 0.0
        p95_exact &= np.array_equal(rasterize_p95(PointCloudSample(pts, classes), res, extent).heights, oracle)
    ok = metric_err <= 1e-9 and bin_err <= 1e-9 and p95_exact
    verdict("C7 oracle equivalence", ok,
            f"metrics {metric_err:.1e}, quartiles {bin_err:.1e}, p95 exact on 10 clouds: {p95_exact}")


# ------------------------------------------------------------------ 8

def test_c08_fap_sanity(verdict):
    worst, same = -np.inf, True
    for seed in range(10):
        rng = np.random.default_rng(80 + seed)
        img = gaussian_blur(rng.standard_normal((64, 64)), 1.0) * 5 + rng.uniform(0, 30, (64, 64))
        orig = fap(img)
        coarse = fap(bicubic_upsample(block_downsample(img, 2), 2))
        sel = orig.frequency > 0.5
        worst = max(worst, float((coarse.value[sel] - orig.value[sel]).max()))
        same &= np.array_equal(fap(img).value, fap(img.copy()).value)
    verdict("C8 FAP sanity", worst <= 1e-12 and same,
            f"max excess above f/fN=0.5 {worst:.3f} (must be <= 0); identical inputs identical: {same}")


# ------------------------------------------------------------------ 9

def test_c09_schedule_values(verdict):
    first, restart = lr_schedule(0, 10), lr_schedule(10, 10)
    verdict("C9 schedule values", first == 1e-3 and restart == 2.5e-4, f"lr(0)={first}, cycle-1 peak={restart}")


# ------------------------------------------------------------------ 10

def test_c10_tiling_consistency(verdict):
    patch, _ = generate_synthetic(SynthConfig(size=100, ref_margin=10), np.random.default_rng(10))
    stats = compute_channel_stats(patch.bands)
    model = CanopyHeightNet(ModelConfig.for_resolution(2.5), seed=0)
    t0 = time.perf_counter()
    whole = predict_patch(model, patch, stats, lidar_offset=0)
    tiled = predict_patch(model, patch, stats, lidar_offset=0, tile=80)
    diff = float(np.abs(whole - tiled).max())
    verdict("C10 tiling consistency", diff < 1e-4,
            f"max |tiled - whole| {diff:.1e} m on a 100x100 patch, 80 px tiles ({time.perf_counter() - t0:.0f} s)")


# ------------------------------------------------------------------ 11

EXPECTED = {
    10.0: dict(n_blocks=4, layers_per_block=4, sr_factor=1),
    5.0: dict(n_blocks=5, layers_per_block=5, sr_factor=2),
    2.5: dict(n_blocks=5, layers_per_block=5, sr_factor=4),
}
SHARED = dict(growth=24, feat_dim=64, heads=4, head_dim=16, fused_dim=64, tau=365.0, mlp_layers=[64, 128, 64])
SAMPLING = dict(t_max=12, t_min=5, window=64)


def test_c11_hyperparameter_audit(verdict):
    mismatches = []
    for res, preset in EXPECTED.items():
        dump = RunConfig.from_dict({"resolution": res}).to_dict()
        for key, want in {**preset, **SHARED}.items():
            if dump["model"][key] != want:
                mismatches.append(f"{res} m model.{key}={dump['model'][key]}")
        for key, want in SAMPLING.items():
            if dump["sampler"][key] != want:
                mismatches.append(f"{res} m sampler.{key}={dump['sampler'][key]}")
        train = dump["train"]
        if (train["batch_size"] * train["accum_steps"], train["lr"], train["restart_decay"]) != (128, 1e-3, 0.25):
            mismatches.append(f"{res} m train={train}")
    verdict("C11 hyperparameter audit", not mismatches,
            "all constants match the frozen table" if not mismatches else "; ".join(mismatches))
