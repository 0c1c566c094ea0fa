"""Acceptance criteria 1-11 at their stated tolerances.

Each test appends a ``criterion N: PASS|FAIL ...`` line that pytest prints in
the "acceptance criteria" summary section. Run on its own with
``pytest tests/test_acceptance.py -v``.
"""

import copy
import math
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, toy_config
from mvinr.bitstream import apply_quantization, deserialize_model, quantize_model, serialize_model
from mvinr.config import ModelConfig, TrainConfig
from mvinr.data_io import MultiViewVideo, video_to_raw
from mvinr.entropy import quantize_tensor, relaxed_rate_bits
from mvinr.metrics import RDCurve, bd_rate, psnr
from mvinr.model import MultiViewINR, is_grid, parameter_census
from mvinr.quantization import ModelQuantizer, reconstruct, symbolize
from mvinr.rangecoder import encode_symbols
from mvinr.synthetic import smooth_rgbd
from mvinr.training import encode_video, evaluate, post_training_quantize, train_stage1, train_stage2
from test_metrics import _synthetic_curve, quadrature_bd_rate
from test_quantization import SCALE, brute_force_symbols, dyadic_pairs

SEEDS = (0, 1, 2)
LAMBDA0 = 1e9
OVERFIT_TRAIN = TrainConfig(stage1_epochs=100, stage2_epochs=30, quant_width=7)


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {n}: {detail}"


# -- the overfit sequence, shared by criteria 5, 7 and 8 --------------------------

@pytest.fixture(scope="module")
def overfit_video():
    return smooth_rgbd(view_count=2, frame_count=8, height=64, width=64, seed=0)


@pytest.fixture(scope="module")
def stage1_runs(overfit_video):
    runs = {}
    for seed in SEEDS:
        model = MultiViewINR(ModelConfig.for_video(2, 8, 64, 64, overlap=2), seed=seed)
        t0 = time.perf_counter()
        train_stage1(overfit_video, model, OVERFIT_TRAIN.replace(seed=seed))
        runs[seed] = (model, time.perf_counter() - t0)
    return runs


@pytest.fixture(scope="module")
def stage2_runs(overfit_video, stage1_runs):
    """(bytes, distortion, psnr) per seed at lambda0 and 10 * lambda0."""
    out = {}
    for seed, (base, _) in stage1_runs.items():
        for lmbda in (LAMBDA0, 10 * LAMBDA0):
            m = copy.deepcopy(base)
            _, encoded, report = train_stage2(overfit_video, m, OVERFIT_TRAIN.replace(seed=seed),
                                              lmbda)
            mse = 10 ** (-report.psnr / 10)  # RGBD samples lie in [0, 1]
            out[seed, lmbda] = (len(encoded.data), mse, report.psnr)
    return out


# -- 1 ---------------------------------------------------------------------------

def test_criterion_1_bitstream_round_trip():
    t0 = time.perf_counter()
    m = MultiViewINR(toy_config(), seed=0)
    q = ModelQuantizer(m)
    quantized = quantize_model(m, q)
    apply_quantization(m, quantized)
    dec = deserialize_model(serialize_model(m, q, (0.5, 9.0), {}, quantized).data).model
    ref = dict(m.named_parameters())
    exact = all(torch.equal(p, ref[n]) for n, p in dec.named_parameters())
    elapsed = time.perf_counter() - t0
    record(1, exact and len(quantized) >= 5 and elapsed < 10,
           f"{len(quantized)} quantized groups bit-exact={exact} in {elapsed:.2f} s")


# -- 2 ---------------------------------------------------------------------------

def test_criterion_2_entropy_estimate_matches_payload():
    rng = np.random.default_rng(2)
    values = rng.normal(0.0, 0.05, 10_000).astype(np.float32)
    q = quantize_tensor(values, np.float32(0.004))
    actual = len(encode_symbols(q.symbols, q.tables()[0]))
    est = q.rate_bits() / 8
    record(2, abs(actual - est) <= 0.02 * est + 64,
           f"estimate {est:.1f} B vs coded {actual} B")


# -- 3 ---------------------------------------------------------------------------

def test_criterion_3_quantizer_oracle():
    rng = np.random.default_rng(3)
    a, b = dyadic_pairs(rng, 1_000_000, tie_fraction=0.2)
    theta, step = a * SCALE, b * SCALE
    s = symbolize(theta, step)
    ties = int((np.abs(a % b) * 2 == b).sum())
    mismatches = int((s != brute_force_symbols(a, b)).sum())
    worst = float(np.max(np.abs(reconstruct(s, step) - theta) / step))
    record(3, mismatches == 0 and worst <= 0.5 and ties > 0,
           f"{mismatches} mismatches over 10^6 pairs ({ties} ties), max |err|/step {worst:.3f}")


# -- 4 ---------------------------------------------------------------------------

def _fd_check(loss, tensors, picks_per_tensor=6, eps=1e-6):
    gen = np.random.default_rng(4)
    grads = torch.autograd.grad(loss(), tensors)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(tensors, grads):
            flat = p.view(-1)
            picks = gen.choice(flat.numel(), size=min(picks_per_tensor, flat.numel()),
                               replace=False)
            scale = max(g.abs().max().item(), 1e-12)
            for i in picks:
                old = flat[i].item()
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
                flat[i] = old
                fd = (up - down) / (2 * eps)
                worst = max(worst, abs(g.reshape(-1)[i].item() - fd) / scale)
    return worst


def test_criterion_4_gradient_checks():
    t0 = time.perf_counter()
    m = MultiViewINR(toy_config(), seed=5).double().train()
    idx = torch.tensor([[0, 0, 0, 1], [1, 2, 1, 0], [1, 1, 0, 0]])
    target = torch.rand(3, 16, 16, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    params = list(m.parameters())
    worst_mse = _fd_check(lambda: (m(idx) - target).pow(2).mean(), params)

    gen = torch.Generator().manual_seed(0)
    theta = (torch.randn(500, generator=gen, dtype=torch.float64) * 0.1).requires_grad_(True)
    noise = torch.rand(500, generator=gen, dtype=torch.float64) - 0.5
    log_step = torch.tensor(math.log(0.01), dtype=torch.float64, requires_grad=True)
    worst_rate = _fd_check(lambda: relaxed_rate_bits(theta, torch.exp(log_step), noise=noise),
                           [theta, log_step], picks_per_tensor=20)
    elapsed = time.perf_counter() - t0
    record(4, worst_mse <= 1e-3 and worst_rate <= 1e-3 and elapsed < 300,
           f"max relative error: MSE {worst_mse:.2e}, rate {worst_rate:.2e}; {elapsed:.1f} s")


# -- 5 ---------------------------------------------------------------------------

def test_criterion_5_overfit(stage1_runs, overfit_video):
    scores = [evaluate(m, overfit_video)[0] for m, _ in stage1_runs.values()]
    minutes = sum(t for _, t in stage1_runs.values()) / 60
    median = float(np.median(scores))
    record(5, median >= 38.0 and OVERFIT_TRAIN.stage1_epochs <= 300 and minutes < 30,
           f"median RGBD PSNR {median:.2f} dB (seeds {', '.join(f'{s:.2f}' for s in scores)}) "
           f"after {OVERFIT_TRAIN.stage1_epochs} epochs, {minutes:.1f} min")


# -- 6 ---------------------------------------------------------------------------

def test_criterion_6_view_sharing(model):
    idx = torch.tensor([[0, 1, 0, 1], [1, 1, 0, 1]])
    with torch.no_grad():
        base = model(idx)
        view_local = backbone_global = True
        for name, p in model.named_parameters():
            old = p.clone()
            p.add_(0.5)
            out = model(idx)
            p.copy_(old)
            changed = [not torch.equal(out[k], base[k]) for k in range(2)]
            if name.startswith("views.0."):
                view_local &= changed == [True, False]
            elif not is_grid(name):
                backbone_global &= all(changed)
    total = sum(parameter_census(model).fractions().values())
    record(6, view_local and backbone_global and abs(total - 1) < 1e-12,
           f"view-0 local={view_local}, backbone reaches all views={backbone_global}, "
           f"census fractions sum {total:.12f}")


# -- 7 ---------------------------------------------------------------------------

def _medians(stage2_runs, lmbda):
    sizes = [stage2_runs[s, lmbda][0] for s in SEEDS]
    dists = [stage2_runs[s, lmbda][1] for s in SEEDS]
    return float(np.median(sizes)), float(np.median(dists))


def test_criterion_7_rd_monotonicity(stage2_runs):
    """As written: size non-increasing and distortion non-decreasing in lambda."""
    size_lo, d_lo = _medians(stage2_runs, LAMBDA0)
    size_hi, d_hi = _medians(stage2_runs, 10 * LAMBDA0)
    record(7, size_hi <= size_lo and d_hi >= d_lo,
           f"[as written] size {size_lo:.0f} -> {size_hi:.0f} B, "
           f"MSE {d_lo:.3e} -> {d_hi:.3e} for lambda {LAMBDA0:g} -> {10 * LAMBDA0:g}")


def test_criterion_7_direction_implied_by_rd_loss(stage2_runs):
    """Under L = R + lambda * D a larger lambda buys distortion with rate."""
    size_lo, d_lo = _medians(stage2_runs, LAMBDA0)
    size_hi, d_hi = _medians(stage2_runs, 10 * LAMBDA0)
    record(7, size_lo <= size_hi and d_lo >= d_hi,
           f"[L = R + lambda*D direction] size {size_lo:.0f} <= {size_hi:.0f} B, "
           f"MSE {d_lo:.3e} >= {d_hi:.3e}")


# -- 8 ---------------------------------------------------------------------------

def test_criterion_8_stage2_beats_post_training_quantization(stage1_runs, stage2_runs,
                                                             overfit_video):
    gains = []
    for seed in SEEDS:
        ptq = evaluate(post_training_quantize(stage1_runs[seed][0], 7), overfit_video)[0]
        gains.append(stage2_runs[seed, 10 * LAMBDA0][2] - ptq)
    median = float(np.median(gains))
    record(8, median >= 0.5,
           f"median gain over width-7 PTQ {median:+.2f} dB "
           f"(seeds {', '.join(f'{g:+.2f}' for g in gains)}) at lambda {10 * LAMBDA0:g}")


# -- 9 ---------------------------------------------------------------------------

def test_criterion_9_stitched_equals_whole_frame(model):
    worst = 0.0
    with torch.no_grad():
        for view in range(2):
            for frame in range(3):
                diff = model.forward_frame(view, frame) - model.forward_whole_frame(view, frame)
                worst = max(worst, diff.abs().max().item())
    record(9, worst <= 1e-5, f"max |stitched - whole| {worst:.2e}")


# -- 10 --------------------------------------------------------------------------

def test_criterion_10_metrics():
    ref = np.full((16, 16), 100.0)
    p = psnr(ref, ref + 1, peak=255)
    rates, q = np.array([0.1, 0.2, 0.4, 0.8]), np.array([30.0, 33.0, 36.0, 39.0])
    half = bd_rate(RDCurve.from_arrays(rates, q), RDCurve.from_arrays(rates / 2, q))
    rng = np.random.default_rng(10)
    quad = 0.0
    for _ in range(200):
        a, b = _synthetic_curve(rng, 0.05, 30.0), _synthetic_curve(rng, 0.04, 30.5)
        quad = max(quad, abs(bd_rate(a, b) - quadrature_bd_rate(a, b)))
    record(10, abs(p - 48.13) <= 0.01 and abs(half + 50) <= 0.01 and quad <= 0.01,
           f"PSNR {p:.3f} dB, half-rate BD {half:.4f}%, worst quadrature gap {quad:.2e}%")


# -- 11 --------------------------------------------------------------------------

def test_criterion_11_end_to_end_determinism(toy_video):
    cfg = TrainConfig(stage1_epochs=5, stage2_epochs=2, batch_size=4, lmbdas=(1e8, 1e10), seed=11)
    runs = [[p.encoded.data for p in encode_video(toy_video, toy_config(), cfg)] for _ in range(2)]

    def decode(data):
        dec = deserialize_model(data)
        video = MultiViewVideo(dec.model.reconstruct().numpy(), dec.depth_range)
        return b"".join(t + d for t, d in video_to_raw(video, 10))

    same_streams = runs[0] == runs[1]
    same_recon = all(decode(x) == decode(y) for x, y in zip(*runs))
    record(11, same_streams and same_recon,
           f"bitstreams identical={same_streams}, reconstructions identical={same_recon}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
