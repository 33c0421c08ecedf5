"""Acceptance suite. Each test prints one line: PASS/FAIL criterion N: <detail>.

Criteria 5-7 train real models and take over an hour in total on one CPU core.
Run alone with ``pytest tests/test_acceptance.py -v -s`` or
``python tests/test_acceptance.py``.
"""

import math
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from gmldm.autoencoder import AEConfig, Autoencoder3D, GaussianLatent, kl_loss
from gmldm.denoiser import attention_weights, patchify, unpatchify
from gmldm.diffusion import DiffusionConfig, forward_sample, forward_step, make_schedule, reverse_step
from gmldm.metrics import pearson, ssim3d
from gmldm.training import (
    AblationConfig,
    directional_checks,
    ae_train_config,
    pretrain_autoencoder,
    run_ablation_grid,
    saliency_from_pipelines,
    smoothed_monotone,
    substream,
    train_ldm,
    write_ablation_csv,
)
from gmldm.volumes import PhantomSpec, generate_dataset

from test_autoencoder import tiny_ae_gradcheck
from test_denoiser import micro_denoiser_gradcheck

SHAPE = (32, 32, 32)
AE_POOL_SEED = 100  # pretraining pool, disjoint from the ablation cohort
COHORT = 250
RESULTS = {}


def report(capsys, n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    with capsys.disabled():
        print("\n" + line, flush=True)
    return ok


# ---------------------------------------------------------------- 1


def test_criterion_1_diffusion_oracles(capsys):
    rng = np.random.default_rng(11)
    start, n, worst_z, worst_se = time.perf_counter(), 10_000, 0.0, 0.0
    for _ in range(5):
        lo = float(rng.uniform(1e-5, 1e-3))
        s = make_schedule(DiffusionConfig(T=50, beta_start=lo, beta_end=float(rng.uniform(0.02, 0.3))))
        for t in (int(rng.integers(1, 51)), 50):
            z0 = float(rng.normal())
            z = np.full(n, z0)
            for k in range(1, t + 1):
                z = forward_step(z, k, rng.standard_normal(n), s)
            closed = forward_sample(np.full(n, z0), t, rng.standard_normal(n), s)
            var = 1 - s.alpha_bars[t - 1]
            se_mean = math.sqrt(2 * var / n)
            se_var = var * math.sqrt(4 / (n - 1))
            worst_se = max(worst_se, abs(z.mean() - closed.mean()) / se_mean,
                           abs(z.var(ddof=1) - closed.var(ddof=1)) / se_var)
        z0 = rng.standard_normal(32)
        for t in range(1, 51):
            z = forward_sample(z0, t, rng.standard_normal(32), s)
            for k in range(t, 0, -1):
                ab = s.alpha_bars[k - 1]
                z = reverse_step(z, (z - math.sqrt(ab) * z0) / math.sqrt(1 - ab), k, s, noise=np.zeros_like(z))
            worst_z = max(worst_z, float(np.max(np.abs(z - z0))))
    took = time.perf_counter() - start
    ok = worst_se < 4 and worst_z < 1e-8 and took < 60
    assert report(capsys, 1, ok, f"closure worst {worst_se:.2f} SE (<4), inversion err {worst_z:.1e} (<1e-8), {took:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_kl_monte_carlo(capsys):
    rng = np.random.default_rng(12)
    start, worst, n = time.perf_counter(), 0.0, 100_000
    for _ in range(20):
        mu, lv = float(rng.normal(0, 1.5)), float(rng.normal(0, 1.0))
        g = GaussianLatent(torch.tensor([mu], dtype=torch.float64), torch.tensor([lv], dtype=torch.float64))
        analytic = float(kl_loss(g))
        sd = math.exp(lv / 2)
        z = mu + sd * rng.standard_normal(n)
        log_q = -0.5 * ((z - mu) / sd) ** 2 - math.log(sd)
        log_p = -0.5 * z ** 2
        d = log_q - log_p
        worst = max(worst, abs(d.mean() - analytic) / (d.std(ddof=1) / math.sqrt(n)))
    took = time.perf_counter() - start
    assert report(capsys, 2, worst < 5 and took < 60, f"20 pairs, worst deviation {worst:.2f} SE (<5), {took:.1f}s")


# ---------------------------------------------------------------- 3


def test_criterion_3_gradient_checks(capsys):
    start = time.perf_counter()
    ae_err = tiny_ae_gradcheck(n_samples=24)
    dn_err = micro_denoiser_gradcheck(n_samples=24)
    took = time.perf_counter() - start
    ok = ae_err < 1e-2 and dn_err < 1e-2 and took < 120
    assert report(capsys, 3, ok, f"24 params each; AE rel err {ae_err:.1e}, denoiser rel err {dn_err:.1e} (<1e-2), {took:.1f}s")


# ---------------------------------------------------------------- 4


def test_criterion_4_shape_and_normalization(capsys):
    start = time.perf_counter()
    checks = {}
    torch.manual_seed(0)
    for std, raw in (((32, 32, 32), (32, 32, 32)), ((32, 32, 32), (48, 56, 48)), ((16, 24, 40), (20, 30, 44))):
        ae = Autoencoder3D(AEConfig(standardized_shape=std, base_channels=4)).eval()
        with torch.no_grad():
            mu = ae.encode(torch.rand(1, 1, *raw)).mu
        checks[f"latent {raw}"] = tuple(mu.shape[1:]) == (256,) + tuple(s // 8 for s in std)
    w = attention_weights(torch.randn(3, 7, 16), torch.randn(3, 925, 16))
    checks["attention rows"] = float((w.sum(-1) - 1).abs().max()) < 1e-6
    z = torch.randn(2, 256, 4, 4, 4)
    checks["patchify"] = torch.equal(unpatchify(patchify(z, 2), (256, 4, 4, 4), 2), z)
    v = np.random.default_rng(0).random(SHAPE)
    checks["ssim identity"] = abs(ssim3d(v, v) - 1) < 1e-12
    checks["pearson identity"] = abs(pearson(v, v) - 1) < 1e-12
    took = time.perf_counter() - start
    failed = [k for k, ok in checks.items() if not ok]
    ok = not failed and took < 60
    assert report(capsys, 4, ok, f"{len(checks) - len(failed)}/{len(checks)} invariants hold{f' (failed: {failed})' if failed else ''}, {took:.1f}s")


# ---------------------------------------------------------------- 5


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    """The desk-scale autoencoder of criterion 5, reused by criteria 6 and 7."""
    pool, _, _ = generate_dataset(PhantomSpec(shape=SHAPE, seed=AE_POOL_SEED), 550)
    start = time.perf_counter()
    model, history = pretrain_autoencoder(pool[:500], AEConfig(), ae_train_config(max_steps=2000, seed=0))
    took = time.perf_counter() - start
    with torch.no_grad():
        held = pool[500:]
        g = model.encode(torch.as_tensor(held)[:, None])
        rec = model.decode(g.mu, SHAPE)[:, 0].numpy()
    score = float(np.mean([pearson(a, b) for a, b in zip(held, rec)]))
    return model, history, score, took


def test_criterion_5_autoencoder_training(capsys, pretrained):
    model, history, score, took = pretrained
    mono = smoothed_monotone([h["total"] for h in history])
    ok = score >= 0.90 and mono and took <= 20 * 60 and len(history) <= 2000
    assert report(capsys, 5, ok, f"held-out Pearson {score:.4f} (>=0.90), smoothed monotone {mono}, "
                                 f"{len(history)} steps, {took / 60:.1f} min (<=20)")


# ---------------------------------------------------------------- 6


@pytest.fixture(scope="module")
def grid(pretrained):
    vols, fncs, _ = generate_dataset(PhantomSpec(shape=SHAPE, seed=0, coupling_strength=1.0), COHORT)
    start = time.perf_counter()
    cells = run_ablation_grid(vols, fncs, pretrained[0], AblationConfig(seed=0))
    return cells, time.perf_counter() - start


def test_criterion_6_directional_table(capsys, grid, tmp_path):
    cells, took = grid
    write_ablation_csv(cells, tmp_path / "ablation.csv")
    with capsys.disabled():
        print("\n" + (tmp_path / "ablation.csv").read_text(), flush=True)
    checks = directional_checks(cells)
    parts = [f"{c['better']} - {c['worse']} = {c['margin']:+.4f} vs 2SE {c['threshold']:.4f}" for c in checks]
    ok = all(c["passed"] for c in checks) and took <= 60 * 60
    assert report(capsys, 6, ok, "; ".join(parts) + f"; {took / 60:.1f} min (<=60)")


# ---------------------------------------------------------------- 7


def test_criterion_7_saliency_localization(capsys, pretrained):
    # one GM-LDM cell on a cohort where only `region` depends on the FNC; random
    # vectors through the same cell serve as the null guidance
    region = 2
    spec = PhantomSpec(shape=SHAPE, seed=7, coupled_regions=(region,))
    start = time.perf_counter()
    vols, fncs, _ = generate_dataset(spec, 200)
    cfg = AblationConfig()
    pipe, _ = train_ldm(vols, fncs, pretrained[0], cfg.latent_denoiser,
                        replace(cfg.ldm_train, max_steps=1500, seed=substream(7, "ldm")), cfg.diffusion, "fnc")
    trained = time.perf_counter()
    hits, tops = 0, []
    for seed in range(5):
        sal = saliency_from_pipelines(pipe, spec, 32, seed=seed)
        tops.append(sal.ranking[0])
        hits += sal.ranking[0] == region
    took = time.perf_counter() - start
    ok = hits >= 4 and took <= 10 * 60
    assert report(capsys, 7, ok, f"coupled region {region} ranked first in {hits}/5 seeds (>=4), tops {tops}, "
                                 f"{(took - (trained - start)) / 60:.1f} min saliency + {(trained - start) / 60:.1f} min "
                                 f"cell training (<=10 total)")


# ---------------------------------------------------------------- 8


def test_criterion_8_cli_determinism(capsys, tmp_path_factory):
    from test_cli import artifact_files, pipeline

    a, b = pipeline(tmp_path_factory.mktemp("r1")), pipeline(tmp_path_factory.mktemp("r2"))
    n, bad = 0, []
    for key in a:
        for f in artifact_files(a[key]):
            n += 1
            if not (b[key] / f).exists() or (a[key] / f).read_bytes() != (b[key] / f).read_bytes():
                bad.append(f"{key}/{f}")
    ok = n > 0 and not bad
    assert report(capsys, 8, ok, f"{n - len(bad)}/{n} CSV/volume/image files bitwise identical across reruns of every command")


if __name__ == "__main__":
    sys.exit(subprocess.call([sys.executable, "-m", "pytest", __file__, "-v", "-s"], cwd=Path(__file__).parent.parent))
