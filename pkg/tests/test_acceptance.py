"""Acceptance gate: nine verification criteria, one test (and one result line) each.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
summary lines alongside the pass/fail status. The suite favors brute-force
oracles and exact identities over benchmark numbers; the only slow entry is
criterion 7, a real 500-step overfit run on synthetic pairs.
"""

import math
import time

import numpy as np
import pytest
import torch

from retinexuhd.config import (
    GssmConfig,
    SambConfig,
    desk_model_config,
    full_model_config,
)
from retinexuhd.data_metrics import (
    PairedSample,
    count_params,
    frequency_gap,
    psnr,
    synth_clean,
    synth_degrade,
)
from retinexuhd.fia import FourierCorrectionBlock, fft_compose, fft_decompose
from retinexuhd.gssm import (
    AttentiveScan,
    ClassificationPolicy,
    GlobalEmbedding,
    Gssm,
    flatten_tokens,
    sgn_fold,
    sgn_unfold,
)
from retinexuhd.objectives import (
    LossWeights,
    charbonnier,
    fft_l1,
    gt_pyramid,
    make_extractor,
    perceptual,
    ssim_loss,
    total_loss,
)
from retinexuhd.retinex_core import RetinexRestorer, recompose
from retinexuhd.samba import ResidualDilatedBlock, Samb
from retinexuhd.training_harness import (
    desk_train_config,
    fit,
    load_checkpoint,
    save_checkpoint,
)


def report(line: str) -> None:
    print(f"\n{line}")


# ---------------------------------------------------------------------------
# 1. scan equivalence against the brute-force recurrence


def _naive_scan(a_bar, b_bar, c, e, x, skip):
    b, length, d, n = a_bar.shape
    h = torch.zeros(b, d, n, dtype=a_bar.dtype)
    ys = []
    for t in range(length):
        h = a_bar[:, t] * h + b_bar[:, t] * x[:, t].unsqueeze(-1)
        ys.append(torch.einsum("bn,bdn->bd", c[:, t] + e[:, t], h) + skip * x[:, t])
    return torch.stack(ys, dim=1)


def test_01_scan_oracle_equivalence():
    torch.manual_seed(101)
    started = time.time()
    worst32 = worst64 = 0.0
    for _ in range(200):
        d = int(torch.randint(1, 9, (1,)))
        n = int(torch.randint(1, 17, (1,)))
        length = int(torch.randint(1, 257, (1,)))
        scan = AttentiveScan(d, n)
        tokens = torch.randn(1, length, d)
        embedding = 0.5 * torch.randn(1, length, n)
        for dtype, budget in ((torch.float32, 1e-6), (torch.float64, 1e-10)):
            x = tokens.to(dtype)
            e = embedding.to(dtype)
            with torch.no_grad():
                fast = scan(x, e)
                a_bar, b_bar, c = scan.discretize(x.to(torch.float64))
                slow = _naive_scan(
                    a_bar, b_bar, c,
                    e.to(torch.float64),
                    x.to(torch.float64),
                    scan.skip.to(torch.float64),
                ).to(dtype)
            err = float((fast - slow).abs().max())
            if dtype is torch.float32:
                worst32 = max(worst32, err)
            else:
                worst64 = max(worst64, err)
            assert err < budget, (dtype, length, d, n, err)
    elapsed = time.time() - started
    assert elapsed < 30.0, f"scan oracle sweep took {elapsed:.1f}s"
    report(
        f"[criterion 1] scan vs per-step recurrence, 200 instances: PASS "
        f"(worst f32 {worst32:.2e}, f64 {worst64:.2e}, {elapsed:.1f}s)"
    )


# ---------------------------------------------------------------------------
# 2. finite-difference gradient suite


def _fd_worst(fn, inputs, eps=1e-5, max_coords=48):
    """Worst relative error between autograd and central differences."""
    leaves = [x.detach().clone().requires_grad_() for x in inputs]
    fn(*leaves).backward()
    worst = 0.0
    for slot, leaf in enumerate(leaves):
        grad = leaf.grad
        flat_len = leaf.numel()
        stride = max(1, flat_len // max_coords)
        for flat in range(0, flat_len, stride):
            idx = np.unravel_index(flat, leaf.shape)
            plus = [x.detach().clone() for x in leaves]
            minus = [x.detach().clone() for x in leaves]
            plus[slot][idx] += eps
            minus[slot][idx] -= eps
            with torch.no_grad():
                fd = (fn(*plus) - fn(*minus)) / (2 * eps)
            denom = max(abs(float(fd)), abs(float(grad[idx])), 1e-8)
            worst = max(worst, abs(float(fd) - float(grad[idx])) / denom)
    return worst


def test_02_finite_difference_gradient_suite():
    torch.manual_seed(102)
    started = time.time()
    tiny = GssmConfig(state_dim=3, num_embeddings=4, embed_rank=2, pos_table_size=4)
    probe8 = torch.randn(1, 4, 8, 8, dtype=torch.float64)

    rdb = ResidualDilatedBlock(4).double().eval()
    samb = Samb(4, SambConfig(), tiny, GlobalEmbedding(2, 3)).double().eval()
    gssm = Gssm(4, tiny, GlobalEmbedding(2, 3)).double().eval()
    fcb = FourierCorrectionBlock(3).double().eval()
    extractor = make_extractor("desk").double()
    probe3 = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    target = torch.rand(1, 3, 8, 8, dtype=torch.float64)

    cases = {
        "recompose": (
            lambda r, l: (recompose(r, l) * probe3).sum(),
            [torch.rand(1, 3, 8, 8, dtype=torch.float64),
             torch.rand(1, 1, 8, 8, dtype=torch.float64) + 0.2],
        ),
        "rdb_forward": (
            lambda x: (rdb(x) * probe8).sum(),
            [torch.randn(1, 4, 8, 8, dtype=torch.float64)],
        ),
        "samb_forward": (
            lambda x: (samb(x) * probe8).sum(),
            [torch.randn(1, 4, 8, 8, dtype=torch.float64)],
        ),
        "gssm_forward": (
            lambda x: (gssm(x) * probe8).sum(),
            [torch.randn(1, 4, 8, 8, dtype=torch.float64)],
        ),
        "fcb_forward": (
            lambda x: (fcb(x) * probe3).sum(),
            [torch.randn(1, 3, 8, 8, dtype=torch.float64)],
        ),
        "charbonnier": (lambda x: charbonnier(x, target), [torch.rand_like(target)]),
        "fft_l1": (lambda x: fft_l1(x, target), [torch.rand_like(target)]),
        "ssim": (lambda x: ssim_loss(x, target), [torch.rand_like(target)]),
        "perceptual": (
            lambda x: perceptual(x, target, extractor),
            [torch.rand_like(target)],
        ),
    }
    results = {}
    for name, (fn, inputs) in cases.items():
        results[name] = _fd_worst(fn, inputs)
        assert results[name] < 1e-4, f"{name}: worst relative error {results[name]:.2e}"
    elapsed = time.time() - started
    assert elapsed < 300.0, f"gradient suite took {elapsed:.1f}s"
    worst = max(results, key=results.get)
    report(
        f"[criterion 2] finite-difference gradients, {len(cases)} ops: PASS "
        f"(worst {results[worst]:.2e} in {worst}, {elapsed:.1f}s)"
    )


# ---------------------------------------------------------------------------
# 3. exact decomposition closure and zero-correction fixed point


def test_03_retinex_closure_and_fixed_point():
    torch.manual_seed(103)
    model = RetinexRestorer(desk_model_config())
    model.eval()
    for image in (torch.rand(1, 3, 33, 47), synth_clean(9, height=32, width=32).unsqueeze(0)):
        with torch.no_grad():
            out = model(image)
            pair, _ = model.decomposer(image)
            direct = recompose(pair.reflectance, pair.illumination).clamp(0.0, 1.0)
        assert torch.equal(out.final_image, direct)
        for raw, level_pair in zip(out.raw_pyramid, out.retinex_pyramid):
            assert torch.equal(raw, recompose(level_pair.reflectance, level_pair.illumination))
    report(
        "[criterion 3] zero-init restore == clamp(decompose-recompose) exactly, "
        "all pyramid levels close: PASS"
    )


# ---------------------------------------------------------------------------
# 4. loss arithmetic: report recomposition and weight schedule


def test_04_loss_report_arithmetic():
    torch.manual_seed(104)
    weights = LossWeights()
    assert (weights.lambda_cb, weights.lambda_fft, weights.lambda_ssim,
            weights.lambda_perceptual) == (1.0, 0.1, 0.5, 0.4)
    assert weights.level_weights == (1.0, 0.5, 0.25)

    extractor = make_extractor("desk")
    gt = torch.rand(1, 3, 16, 16)
    pyramid_gt = gt_pyramid(gt)
    pyramid_pred = [t + 0.05 * torch.randn_like(t) for t in pyramid_gt]
    rep = total_loss(pyramid_pred, pyramid_gt, weights, extractor)
    assert abs(rep.recompute() - float(rep.total)) <= 1e-10

    manual = 0.0
    for i, lw in enumerate(weights.level_weights):
        p, g = pyramid_pred[i], pyramid_gt[i]
        manual += lw * (
            1.0 * float(charbonnier(p, g))
            + 0.1 * float(fft_l1(p, g))
            + 0.5 * float(ssim_loss(p, g))
            + 0.4 * float(perceptual(p, g, extractor))
        )
    assert abs(manual - float(rep.total)) < 1e-9

    single = total_loss(pyramid_pred, pyramid_gt, weights.single_level(), extractor)
    level0_only = (
        1.0 * float(charbonnier(pyramid_pred[0], pyramid_gt[0]))
        + 0.1 * float(fft_l1(pyramid_pred[0], pyramid_gt[0]))
        + 0.5 * float(ssim_loss(pyramid_pred[0], pyramid_gt[0]))
        + 0.4 * float(perceptual(pyramid_pred[0], pyramid_gt[0], extractor))
    )
    assert abs(float(single.total) - level0_only) < 1e-9

    unscaled = total_loss(pyramid_pred, pyramid_gt, weights.unscaled(), extractor)
    flat = sum(
        1.0 * float(charbonnier(p, g)) + 0.1 * float(fft_l1(p, g))
        + 0.5 * float(ssim_loss(p, g)) + 0.4 * float(perceptual(p, g, extractor))
        for p, g in zip(pyramid_pred, pyramid_gt)
    )
    assert abs(float(unscaled.total) - flat) < 1e-9

    no_fft = LossWeights(use_fft=False)
    rep2 = total_loss(pyramid_pred, pyramid_gt, no_fft, extractor)
    assert "fft_l1" not in rep2.term_values
    report(
        "[criterion 4] loss report recomposes to 1e-10; term weights (1, 0.1, 0.5, 0.4) "
        "and level weights (1, 1/2, 1/4) verified by toggles: PASS"
    )


# ---------------------------------------------------------------------------
# 5. spectral and permutation identities


def test_05_fft_and_permutation_identities():
    torch.manual_seed(105)
    for h, w in ((16, 16), (17, 23), (32, 20)):
        x = torch.randn(1, 3, h, w)
        assert float((fft_compose(fft_decompose(x), (h, w)) - x).abs().max()) < 1e-5

    policy = ClassificationPolicy(6, 5)
    for train in (True, False):
        policy.train(train)
        y_cp = policy(torch.randn(2, 40, 6))
        assert torch.all((y_cp == 0.0) | (y_cp == 1.0))
        assert torch.all(y_cp.sum(dim=-1) == 1.0)

    feat = torch.randn(2, 6, 5, 8)
    y_cp = policy(flatten_tokens(feat))
    tokens, order = sgn_unfold(feat, y_cp)
    assert torch.equal(sgn_fold(tokens, order, 5, 8), feat)

    for _ in range(5):
        scan = AttentiveScan(4, 8)
        a_bar, _, _ = scan.discretize(torch.randn(1, 30, 4, dtype=torch.float64))
        assert torch.all(a_bar > 0.0) and torch.all(a_bar < 1.0)
    report(
        "[criterion 5] FFT round trip < 1e-5, fold(unfold) exact, one-hot rows exact, "
        "decay factors inside (0, 1): PASS"
    )


# ---------------------------------------------------------------------------
# 6. frequency-gap verdict directions on synthetic corruption families


def test_06_frequency_verdict_directions():
    started = time.time()
    tallies = {"haze": 0, "blur": 0}
    for seed in range(50):
        clean = synth_clean(seed)
        hazy = synth_degrade(clean, "haze", seed=seed)
        if frequency_gap(hazy, clean).verdict == "global-dominant":
            tallies["haze"] += 1
        blurred = synth_degrade(clean, "blur", seed=seed)
        if frequency_gap(blurred, clean).verdict == "local-dominant":
            tallies["blur"] += 1
    elapsed = time.time() - started
    assert tallies["haze"] >= 45, f"haze global-dominant only {tallies['haze']}/50"
    assert tallies["blur"] >= 45, f"blur local-dominant only {tallies['blur']}/50"
    assert elapsed < 120.0, f"frequency sweep took {elapsed:.1f}s"
    report(
        f"[criterion 6] verdict directions: PASS (haze {tallies['haze']}/50 global, "
        f"blur {tallies['blur']}/50 local, {elapsed:.1f}s)"
    )


# ---------------------------------------------------------------------------
# 7. desk-scale overfit run


def test_07_desk_overfit(tmp_path):
    started = time.time()
    dataset = []
    for i in range(8):
        clean = synth_clean(100 + i, height=64, width=64)
        degraded = synth_degrade(clean, "lowlight", seed=100 + i)
        dataset.append(PairedSample(degraded=degraded, clean=clean, identifier=f"p{i}"))
    input_psnr = float(np.mean([psnr(s.degraded, s.clean) for s in dataset]))

    train_cfg = desk_train_config()
    train_cfg.seed = 0
    result = fit(dataset, train_cfg, desk_model_config(), tmp_path)

    start_loss = float(np.mean([r["total"] for r in result.history[:10]]))
    end_loss = float(np.mean([r["total"] for r in result.history[-10:]]))
    gain = result.best_psnr - input_psnr
    elapsed = time.time() - started
    assert gain >= 3.0, f"PSNR gain {gain:.2f} dB below 3 dB (from {input_psnr:.2f})"
    assert end_loss <= 0.5 * start_loss, (
        f"loss fell only {100 * (1 - end_loss / start_loss):.1f}% "
        f"({start_loss:.4f} -> {end_loss:.4f})"
    )
    assert elapsed < 1200.0, f"overfit run took {elapsed / 60:.1f} min"
    report(
        f"[criterion 7] desk overfit, 8x64^2 for 500 steps: PASS "
        f"(+{gain:.2f} dB over {input_psnr:.2f} dB input, loss {start_loss:.4f} -> "
        f"{end_loss:.4f}, {elapsed / 60:.1f} min)"
    )


# ---------------------------------------------------------------------------
# 8. parameter accounting

# Nominal size of the full-scale reference design; the delta is informational.
FULL_SCALE_DESIGN_TOTAL = 4_726_000


def test_08_parameter_accounting():
    class Unit(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.conv = torch.nn.Conv2d(3, 16, 3)
            self.linear = torch.nn.Linear(8, 4)
            self.norm = torch.nn.LayerNorm(8)

    counts = count_params(Unit())
    assert counts["conv"] == 3 * 3 * 3 * 16 + 16 == 448
    assert counts["linear"] == 8 * 4 + 4
    assert counts["norm"] == 16
    assert counts["total"] == 448 + 36 + 16

    full = count_params(RetinexRestorer(full_model_config()))
    assert 150_000 <= full["fia"] <= 250_000, f"FIA branch at {full['fia']} parameters"
    delta = full["total"] - FULL_SCALE_DESIGN_TOTAL
    report(
        f"[criterion 8] unit-layer counts exact, full-preset FIA {full['fia'] / 1e6:.3f}M "
        f"inside [0.15M, 0.25M]: PASS (total {full['total'] / 1e6:.3f}M, "
        f"{delta / 1e6:+.3f}M vs the {FULL_SCALE_DESIGN_TOTAL / 1e6:.3f}M design total, informational)"
    )


# ---------------------------------------------------------------------------
# 9. determinism and serialization


def test_09_determinism_and_serialization(tmp_path):
    dataset = []
    for i in range(2):
        clean = synth_clean(200 + i, height=64, width=64)
        degraded = synth_degrade(clean, "lowlight", seed=200 + i)
        dataset.append(PairedSample(degraded=degraded, clean=clean, identifier=f"d{i}"))

    cfg = desk_train_config()
    cfg.max_steps = 5
    cfg.seed = 3
    runs = [fit(dataset, cfg, desk_model_config(), tmp_path / name) for name in ("a", "b")]
    assert len(runs[0].history) == 5
    for ra, rb in zip(runs[0].history, runs[1].history):
        assert ra == rb, f"replay diverged at step {ra['step']}"

    model, _ = load_checkpoint(runs[0].last_path)
    twice = tmp_path / "again.npz"
    save_checkpoint(twice, model)
    reloaded, _ = load_checkpoint(twice)
    state_a, state_b = model.state_dict(), reloaded.state_dict()
    assert set(state_a) == set(state_b)
    for name in state_a:
        assert torch.equal(state_a[name], state_b[name]), name

    model.eval()
    probe = dataset[0].degraded.unsqueeze(0)
    with torch.no_grad():
        first = model(probe).final_image
        second = model(probe).final_image
    assert torch.equal(first, second)
    report(
        "[criterion 9] 5-step replay identical, checkpoint round trip bit-exact, "
        "eval restore bit-identical: PASS"
    )
