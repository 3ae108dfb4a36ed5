"""Acceptance suite: one test per criterion, summarised at the end of the run.

Criteria 10 and 11 train real models and take several minutes; set
``LPGFLOW_ACCEPT_DIR`` to reuse a pretrained base between runs.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from lpgflow import checkpoint as ck
from lpgflow import numerics as nx
from lpgflow import protocols
from lpgflow import taskdata as td
from lpgflow.config import RunConfig
from lpgflow.errors import FallbackToRandomMask
from lpgflow.evaluate import attention_heatmaps, psnr, ssim
from lpgflow.flow import euler_sample, interpolate, make_schedule, rf_loss
from lpgflow.images import save_png
from lpgflow.lpg import MatchSet, crop_pixel_set, matching_mask
from lpgflow.model import DiT, LoraAdapter, ModelConfig, lora_merge
from lpgflow.sample import sample_batch
from lpgflow.train import train

from conftest import perturb, random_inputs


def criterion(n, title):
    return pytest.mark.criterion(n, title)


@pytest.fixture(scope="session")
def accept_dir(tmp_path_factory):
    env = os.environ.get("LPGFLOW_ACCEPT_DIR")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("accept")


@pytest.fixture(scope="session")
def base_checkpoint(accept_dir):
    return protocols.pretrain_base(accept_dir / "base")


def small_dataset(tmp_path, task="colorize", n=4, size=16):
    return td.build_dataset(task, n, 3, tmp_path / f"data_{task}_{n}", size=size)


SMALL_MODEL = {"patch_size": 4, "hidden_dim": 16, "num_layers": 2, "num_heads": 2, "lora_rank": 2,
               "num_prompt_tokens": 3, "time_freq_dim": 8}


def small_run_config(manifest, **over):
    cfg = {"model": SMALL_MODEL, "optimizer": {"train_steps": 5, "batch_size": 2},
           "task": {"image_size": 16}, "paths": {"manifest": [str(manifest)]}}
    cfg.update(over)
    return RunConfig.from_dict(cfg)


@criterion(1, "gradient check of the full flow loss on 5 random tiny configs")
def test_gradient_correctness(record_property):
    t0 = time.time()
    worst = 0.0
    for k in range(5):
        rng = np.random.default_rng(100 + k)
        heads = int(rng.choice([1, 2]))
        cfg = ModelConfig(patch_size=int(rng.choice([2, 4])), hidden_dim=8 * heads * int(rng.integers(1, 3)),
                          num_layers=int(rng.integers(1, 3)), num_heads=heads, lora_rank=2,
                          mlp_ratio=2, time_freq_dim=8, num_prompt_tokens=2)
        model = perturb(DiT(cfg, seed=k), rng, std=0.2)
        model.set_trainable(True)
        adapter = LoraAdapter.create(cfg, "colorize", rng)
        for _, b in adapter.factors.values():
            b.data = rng.normal(0, 0.1, b.shape).astype(np.float32)
        inputs = random_inputs(rng, batch=2, size=2 * cfg.patch_size)
        z0 = rng.uniform(0, 1, inputs["z_t"].shape)
        eps = rng.standard_normal(z0.shape)

        def loss():
            return rf_loss(model(**inputs, adapter=adapter), z0, eps)

        point = model.parameters() + adapter.parameters()
        worst = max(worst, nx.grad_check(loss, point, max_coords=4, rng=rng))
    elapsed = time.time() - t0
    record_property("max_rel_err", f"{worst:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert worst <= 1e-3
    assert elapsed < 60


@criterion(2, "fresh LoRA adapter leaves the forward pass bitwise unchanged")
def test_lora_identity_at_init(record_property):
    rng = np.random.default_rng(2)
    cfg = ModelConfig()
    model = perturb(DiT(cfg, seed=2), rng)
    adapter = LoraAdapter.create(cfg, "colorize", rng)
    mismatches = 0
    for i in range(100):
        inputs = random_inputs(np.random.default_rng(i), batch=1, size=32)
        base = model(**inputs).data
        tuned = model(**inputs, adapter=adapter).data
        mismatches += int(base.tobytes() != tuned.tobytes())
    record_property("mismatches", mismatches)
    assert mismatches == 0


@criterion(3, "merged adapters equal the explicit sum of low-rank deltas")
def test_multi_lora_merge(record_property):
    rng = np.random.default_rng(3)
    cfg = ModelConfig(hidden_dim=64, num_layers=2)
    model = perturb(DiT(cfg, seed=3), rng)
    adapters = [LoraAdapter.create(cfg, task, rng, scale=s)
                for task, s in (("colorize", 1.0), ("deblur", 0.5), ("img2depth", 2.0))]
    for ad in adapters:
        for _, b in ad.factors.values():
            b.data = rng.normal(0, 0.02, b.shape).astype(np.float32)
    merged = lora_merge(adapters)

    # per site in working precision: merged factors against the explicit sum of deltas
    worst_site = 0.0
    for site, (a, b) in merged.factors.items():
        x = rng.standard_normal((16, a.shape[1])).astype(np.float32)
        explicit = sum(ad.scale * (x @ ad.factors[site][0].data.T) @ ad.factors[site][1].data.T
                       for ad in adapters)
        got = merged.scale * (x @ a.data.T) @ b.data.T
        worst_site = max(worst_site, float(np.abs(got - explicit).max()))

    # whole network in float64: merged adapter against dense weights with every delta folded in,
    # so float32 rounding of the folded weights does not mask the comparison
    worst = 0.0
    with nx.precision(np.float64):
        for p in model.params.values():
            p.data = p.data.astype(np.float64)
        for a, b in merged.factors.values():
            a.data, b.data = a.data.astype(np.float64), b.data.astype(np.float64)
        folded = DiT(cfg)
        for name, p in model.params.items():
            folded.params[name].data = p.data.copy()
        for site in merged.factors:
            delta = sum(ad.scale * (ad.factors[site][1].data.astype(np.float64)
                                    @ ad.factors[site][0].data.astype(np.float64)) for ad in adapters)
            folded.params[site + ".w"].data = folded.params[site + ".w"].data + delta.T
        for i in range(5):
            inputs = random_inputs(np.random.default_rng(30 + i), batch=2, size=32)
            diff = model(**inputs, adapter=merged).data - folded(**inputs).data
            worst = max(worst, float(np.abs(diff).max()))
    record_property("site_max_abs_diff", f"{worst_site:.2e}")
    record_property("max_abs_diff", f"{worst:.2e}")
    assert worst_site <= 1e-6 and worst <= 1e-6


@criterion(4, "oracle velocity makes the Euler sampler exact")
def test_rectified_flow_exactness(record_property):
    rng = np.random.default_rng(4)
    z0 = rng.uniform(0, 1, (2, 32, 64, 3)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    errs = {}
    for n in (1, 5, 50):
        out = euler_sample(lambda z, t: eps - z0, eps, make_schedule(n))
        errs[n] = float(np.abs(out - z0).max())
    t = rng.uniform(0, 1, 2)
    loss = rf_loss(eps - z0, z0, interpolate(z0, eps, t).eps).item()
    record_property("max_err", f"{max(errs.values()):.1e}")
    record_property("oracle_loss", loss)
    assert all(e <= 1e-5 for e in errs.values())
    assert loss == 0.0


@criterion(5, "LoRA training leaves base weights byte-identical")
def test_frozen_base(tmp_path, record_property):
    manifest = small_dataset(tmp_path)
    base_cfg = small_run_config(manifest, tuning_mode="full")
    base = train(base_cfg, out_dir=tmp_path / "base")
    path = tmp_path / "base" / "model.lpgf"
    initial = ck.encode(ck.model_checkpoint(ck.model_from_checkpoint(ck.load(path))))
    checked = 0
    for seed, lr in ((0, 1e-4), (1, 1e-2), (2, 1.0)):
        cfg = small_run_config(manifest, tuning_mode="lora", seed=seed,
                               optimizer={"train_steps": 5, "batch_size": 2, "lr": lr},
                               paths={"manifest": [str(manifest)], "base_checkpoint": str(path)})
        result = train(cfg, out_dir=tmp_path / f"lora{seed}")
        assert any(np.any(b.data != 0) for _, b in result.adapter.factors.values())
        after = ck.encode(ck.model_checkpoint(result.model))
        saved = ck.encode(ck.model_checkpoint(ck.model_from_checkpoint(ck.load(tmp_path / f"lora{seed}" / "model.lpgf"))))
        assert after == initial and saved == initial
        checked += 1
    record_property("runs", checked)
    assert base.adapter is None


@criterion(6, "mask sampler draws matching masks a quarter of the time")
def test_mask_mix_ratio(record_property):
    rng = nx.rng_stream(6, "mask-mix")
    draws = [td.mask_mode_sampler(rng) for _ in range(10_000)]
    frac = draws.count("matching") / len(draws)
    record_property("matching_fraction", frac)
    assert 0.235 <= frac <= 0.265


@criterion(7, "matching masks respect vertex count, crop fraction and crop containment")
def test_matching_mask_geometry(record_property):
    bad = 0
    for i in range(1000):
        rng = nx.rng_stream(7, "geometry", i)
        scene = td.gen_scene(int(rng.integers(0, 2 ** 31 - 1)), 32)
        while True:
            view, matches, overlap = td.warp_view(scene, td.random_homography(rng, 32), rng)
            if td.overlap_filter(overlap):
                break
        mm = matching_mask(matches, 32, 32, rng)
        x0, y0, x1, y1 = mm.crop
        v = mm.vertices
        inside_crop = np.all((v[:, 0] >= x0) & (v[:, 0] <= x1) & (v[:, 1] >= y0) & (v[:, 1] <= y1))
        target = mm.mask[:, 32:, 0] > 0
        contained = not (target & ~crop_pixel_set(mm.crop, 32, 32)).any()
        ok = (15 <= len(v) <= 30 and 0.20 <= mm.crop_fraction <= 0.50 and inside_crop and contained
              and not mm.mask[:, :32].any())
        bad += int(not ok)

    fallbacks = 0
    for i in range(1000):
        rng = nx.rng_stream(7, "low-confidence", i)
        pts = rng.uniform(0, 32, (200, 2))
        weak = MatchSet(left=pts, right=pts, confidence=rng.uniform(0, 0.8 - 1e-9, 200))
        try:
            matching_mask(weak, 32, 32, rng)
        except FallbackToRandomMask:
            fallbacks += 1
    record_property("violations", bad)
    record_property("fallback_rate", fallbacks / 1000)
    assert bad == 0 and fallbacks == 1000


@criterion(8, "overlap filter accepts exactly 0.40 through 0.70")
def test_overlap_filter(record_property):
    sweep = np.round(np.arange(101) * 0.01, 2)
    accepted = [float(f) for f in sweep if td.overlap_filter(float(f))]
    expected = [round(0.40 + 0.01 * k, 2) for k in range(31)]
    record_property("accepted", f"{accepted[0]}..{accepted[-1]} ({len(accepted)})")
    assert accepted == expected


@criterion(9, "metric oracles")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(9)
    a = np.zeros((32, 32, 3))
    half = psnr(a, a + 0.5)
    img = rng.uniform(0, 1, (32, 32, 3))
    self_ssim = ssim(img, img)
    base = rng.uniform(0.2, 0.8, (32, 32, 3))
    noise = rng.standard_normal(base.shape)
    curve = [psnr(base, np.clip(base + s * noise, 0, 1)) for s in (0.01, 0.05, 0.1)]
    record_property("psnr_half", f"{half:.4f}")
    record_property("psnr_curve", "/".join(f"{v:.2f}" for v in curve))
    assert abs(half - 6.0206) <= 1e-3
    assert abs(self_ssim - 1.0) <= 1e-9
    assert curve[0] > curve[1] > curve[2]


@criterion(10, "colorisation with 10 pairs: loss falls to 0.3x and PSNR gains 3 dB")
def test_desk_scale_learning_trend(accept_dir, record_property):
    t0 = time.time()
    res = protocols.colorize_trend(accept_dir / "colorize")
    total = time.time() - t0
    record_property("loss_ratio", f"{res.loss_ratio:.3f}")
    record_property("psnr", f"{res.psnr_baseline:.2f}->{res.psnr_tuned:.2f}")
    record_property("minutes", f"{total / 60:.1f}")
    assert res.loss_ratio <= 0.3
    assert res.psnr_tuned >= res.psnr_baseline + 3.0
    assert total <= 2 * 3600


@criterion(11, "data-efficiency sweep: edge alignment does not drop from 1 to 100 pairs")
def test_data_efficiency_sweep(base_checkpoint, accept_dir, record_property):
    reports = protocols.data_efficiency_sweep(base_checkpoint, accept_dir / "sweep")
    means = {n: r.aggregate()["edge_alignment"]["mean"] for n, r in reports.items()}
    digests = {r.config_digest for r in reports.values()}
    record_property("edge_alignment", "/".join(f"{means[n]:.3f}" for n in sorted(means)))
    assert sorted(means) == [1, 10, 100]
    assert len(digests) == 1
    assert all((accept_dir / "sweep" / f"report_{n}.json").exists() for n in means)
    assert means[1] <= means[10] <= means[100]


@criterion(12, "attention dumps every 10 of 50 steps with normalised rows")
def test_attention_instrumentation(tmp_path, record_property):
    rng = np.random.default_rng(12)
    cfg = ModelConfig()
    model = perturb(DiT(cfg, seed=12), rng, std=0.05)
    left = rng.uniform(0, 1, (1, 32, 32, 3)).astype(np.float32)
    cap = np.array([[td.TOKEN_ID["colorize"]] + [0] * 7])
    out = sample_batch(model, left, cap, steps=50, seed=0, attn_interval=10)
    steps = sorted({r["step"] for r in out.attention})
    row_err = max(float(np.abs(r["row_sums"] - 1).max()) for r in out.attention)
    lm = np.concatenate([r["left_mass"].ravel() for r in out.attention])
    files = attention_heatmaps(out.attention, tmp_path)
    record_property("steps", steps)
    record_property("row_err", f"{row_err:.1e}")
    assert steps == [0, 10, 20, 30, 40]
    assert len(files) == 5 * cfg.num_layers
    assert row_err <= 1e-5
    assert lm.min() >= 0 and lm.max() <= 1


@criterion(13, "identical config and seed reproduce bytes; checkpoints round-trip")
def test_determinism(tmp_path, record_property):
    manifest = small_dataset(tmp_path)
    runs = []
    for name in ("a", "b"):
        cfg = small_run_config(manifest, tuning_mode="full", seed=13)
        res = train(cfg, out_dir=tmp_path / name)
        lefts = td.gen_scene(5, 16).rgb[None]
        img = sample_batch(res.model, lefts, np.zeros((1, 8), dtype=np.int64), steps=10, seed=13).right[0]
        save_png(tmp_path / name / "out.png", img)
        runs.append(tmp_path / name)
    a, b = runs
    same_csv = (a / "loss.csv").read_bytes() == (b / "loss.csv").read_bytes()
    same_png = (a / "out.png").read_bytes() == (b / "out.png").read_bytes()
    raw = (a / "model.lpgf").read_bytes()
    ck.save(tmp_path / "again.lpgf", ck.load(a / "model.lpgf"))
    same_ckpt = (tmp_path / "again.lpgf").read_bytes() == raw
    record_property("csv/png/ckpt", f"{same_csv}/{same_png}/{same_ckpt}")
    assert same_csv and same_png and same_ckpt
