"""Two-stage encoding: distortion-only fitting, then rate-regularised fine-tuning."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch.func import functional_call

from .bitstream import EncodedModel, apply_quantization, quantize_model, serialize_model
from .config import ConfigError, ModelConfig, TrainConfig, scale_widths
from .data_io import MultiViewVideo, iter_epoch_batches
from .entropy import SUPPORT_HALF_WIDTH, relaxed_rate_bits
from .metrics import rgbd_psnr
from .model import MultiViewINR
from .quantization import ModelQuantizer, QuantNoiseState, quant_noise_apply

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    distortion: float
    rate_bits: float
    loss: float
    noise_rate: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    psnr_per_view: list[float] = field(default_factory=list)
    psnr: float = float("nan")
    rate_estimate_bits: float = float("nan")
    bitstream_bytes: int = 0
    lmbda: float | None = None

    def stage(self, n: int) -> list[EpochRecord]:
        return [e for e in self.epochs if e.stage == n]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "epoch", **asdict(e)}) for e in self.epochs]
        lines.append(json.dumps({
            "type": "final", "lmbda": self.lmbda, "psnr": self.psnr,
            "psnr_per_view": self.psnr_per_view, "rate_estimate_bits": self.rate_estimate_bits,
            "bitstream_bytes": self.bitstream_bytes}))
        return "\n".join(lines) + "\n"


def noise_rate_schedule(epoch: int, config: TrainConfig) -> float:
    """Quant-Noise rate rising linearly from ``noise_start`` to ``noise_end`` over Stage 2."""
    n = config.stage2_epochs
    if not 0 <= epoch < max(n, 1):
        raise ValueError(f"epoch {epoch} outside stage 2 range [0, {n})")
    if n <= 1:
        return config.noise_end
    return config.noise_start + (config.noise_end - config.noise_start) * epoch / (n - 1)


def _patch_view(video: MultiViewVideo, patch_size: int) -> torch.Tensor:
    k, t, h, w, c = video.shape
    m = patch_size
    s = torch.from_numpy(np.ascontiguousarray(video.samples, dtype=np.float32))
    return s.reshape(k, t, h // m, m, w // m, m, c).permute(0, 1, 2, 4, 3, 5, 6)


def _targets(patches: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return patches[idx[:, 0], idx[:, 1], idx[:, 2], idx[:, 3]]


def _check_compatible(video: MultiViewVideo, config: ModelConfig) -> None:
    got = tuple(video.shape[:4])
    want = (config.view_count, config.frame_count, config.height, config.width)
    if got != want:
        raise ConfigError(f"video shape {got} does not match model geometry {want}")


def _cosine(step: int, total: int, warmup: int, floor: float) -> float:
    if warmup and step < warmup:
        return (step + 1) / warmup
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress))


def _finite(value: torch.Tensor, stage: int, epoch: int, step: int) -> None:
    if not torch.isfinite(value):
        raise TrainingError(
            f"non-finite loss {value.item()} at stage {stage}, epoch {epoch}, step {step}")


def train_stage1(video: MultiViewVideo, model: MultiViewINR, config: TrainConfig,
                 report: TrainReport | None = None) -> TrainReport:
    """Fit the model to the video with RGBD MSE only; no quantisation or rate term."""
    _check_compatible(video, model.config)
    report = report or TrainReport()
    patches = _patch_view(video, model.config.patch_size)
    rng = np.random.default_rng(config.seed)
    n_patches = math.prod(video.shape[:2]) * model.config.patch_rows * model.config.patch_cols
    steps_per_epoch = math.ceil(n_patches / config.batch_size)
    total = config.stage1_epochs * steps_per_epoch
    warmup = config.warmup_epochs * steps_per_epoch
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: _cosine(s, total, warmup, config.min_lr_ratio))
    model.train()
    step = 0
    for epoch in range(config.stage1_epochs):
        t0 = time.perf_counter()
        acc = 0.0
        for idx in iter_epoch_batches(video, config.batch_size, rng, model.config.patch_size):
            idx = torch.from_numpy(idx)
            loss = (model(idx) - _targets(patches, idx)).pow(2).mean()
            _finite(loss, 1, epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            acc += loss.item() * len(idx)
            step += 1
        d = acc / n_patches
        report.epochs.append(EpochRecord(1, epoch, d, 0.0, d, 0.0, time.perf_counter() - t0))
        log.debug("stage1 epoch %d D=%.3e", epoch, d)
    model.eval()
    return report


def _support(p: torch.Tensor, step: torch.Tensor):
    with torch.no_grad():
        centre = p.mean() / step
        return (torch.floor(centre - SUPPORT_HALF_WIDTH), torch.ceil(centre + SUPPORT_HALF_WIDTH))


def model_rate_bits(model: MultiViewINR, quantizer: ModelQuantizer,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    """Relaxed (training-mode) code length of every regularised tensor, in bits."""
    params = dict(model.named_parameters())
    return sum(relaxed_rate_bits(params[n], quantizer.step(n), generator)
               for n in quantizer.names)


def quantized_forward(model: MultiViewINR, quantizer: ModelQuantizer, idx: torch.Tensor,
                      state: QuantNoiseState | None, training: bool = True) -> torch.Tensor:
    params = dict(model.named_parameters())
    subst = {}
    for n in quantizer.names:
        step = quantizer.step(n)
        lo, hi = _support(params[n], step)
        subst[n] = quant_noise_apply(params[n], step, state, training, lo, hi)
    return functional_call(model, subst, (idx,))


def train_stage2(video: MultiViewVideo, model: MultiViewINR, config: TrainConfig,
                 lmbda: float, report: TrainReport | None = None, side_info: dict | None = None):
    """Fine-tune under ``L = R + lmbda * D`` with scheduled Quant-Noise.

    Step sizes start at the configured quantisation width. Returns the
    quantiser, the encoded bitstream and the report; on return the model holds
    exactly the parameters a decoder reconstructs.
    """
    _check_compatible(video, model.config)
    report = report or TrainReport()
    report.lmbda = lmbda
    quantizer = ModelQuantizer(model, width=config.quant_width)
    patches = _patch_view(video, model.config.patch_size)
    rng = np.random.default_rng(config.seed + 1)
    gen = torch.Generator().manual_seed(config.seed + 1)
    n_patches = math.prod(video.shape[:2]) * model.config.patch_rows * model.config.patch_cols
    opt = torch.optim.Adam([
        {"params": list(model.parameters()), "lr": config.stage2_param_lr},
        {"params": list(quantizer.parameters()), "lr": config.stage2_step_lr},
    ])
    model.train()
    step = 0
    for epoch in range(config.stage2_epochs):
        t0 = time.perf_counter()
        state = QuantNoiseState(noise_rate_schedule(epoch, config), gen)
        acc_d = acc_r = 0.0
        n_steps = 0
        for idx in iter_epoch_batches(video, config.batch_size, rng, model.config.patch_size):
            idx = torch.from_numpy(idx)
            pred = quantized_forward(model, quantizer, idx, state)
            d = (pred - _targets(patches, idx)).pow(2).mean()
            r = model_rate_bits(model, quantizer, gen)
            loss = r + lmbda * d
            _finite(loss, 2, epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            quantizer.project(model)
            acc_d += d.item() * len(idx)
            acc_r += r.item()
            n_steps += 1
            step += 1
        d_mean, r_mean = acc_d / n_patches, acc_r / n_steps
        report.epochs.append(EpochRecord(2, epoch, d_mean, r_mean, r_mean + lmbda * d_mean,
                                         state.noise_rate, time.perf_counter() - t0))
        log.debug("stage2 epoch %d D=%.3e R=%.0f", epoch, d_mean, r_mean)
    model.eval()
    encoded, quantized = finalize(model, quantizer, video, side_info)
    report.rate_estimate_bits = (sum(q.rate_bits() for q in quantized.values())
                                 + 16 * sum(model.get_parameter(n).numel()
                                            for n in quantizer.raw_names))
    report.bitstream_bytes = len(encoded.data)
    evaluate(model, video, report)
    return quantizer, encoded, report


def finalize(model: MultiViewINR, quantizer: ModelQuantizer, video: MultiViewVideo,
             side_info: dict | None = None):
    """Quantise fully, write the decoder's view of the parameters back, and serialise."""
    quantized = quantize_model(model, quantizer)
    apply_quantization(model, quantized)
    encoded = serialize_model(model, quantizer, video.depth_range, side_info, quantized)
    return encoded, quantized


def post_training_quantize(model: MultiViewINR, width: int = 7) -> MultiViewINR:
    """Copy of ``model`` quantised at initial step sizes, with no fine-tuning."""
    out = copy.deepcopy(model)
    quantizer = ModelQuantizer(out, width=width)
    apply_quantization(out, quantize_model(out, quantizer))
    out.eval()
    return out


@torch.no_grad()
def evaluate(model: MultiViewINR, video: MultiViewVideo, report: TrainReport | None = None):
    """RGBD PSNR per view and overall of the clamped reconstruction."""
    model.eval()
    rec = model.reconstruct().numpy()
    per_view = [rgbd_psnr(video.samples[k], rec[k]) for k in range(video.view_count)]
    overall = rgbd_psnr(video.samples, rec)
    if report is not None:
        report.psnr_per_view = per_view
        report.psnr = overall
    return overall, per_view


@dataclass
class RatePoint:
    lmbda: float
    model: MultiViewINR
    encoded: EncodedModel
    report: TrainReport


def encode_video(video: MultiViewVideo, model_config: ModelConfig, config: TrainConfig,
                 side_info: dict | None = None) -> list[RatePoint]:
    """Encode one bitstream per lambda.

    Stage 1 runs once per distinct width multiplier; each lambda then
    fine-tunes its own copy of the matching Stage-1 model.
    """
    if not config.lmbdas:
        raise ConfigError("at least one lambda value is required")
    _check_compatible(video, model_config)
    multipliers = config.width_multipliers or (1.0,) * len(config.lmbdas)
    stage1: dict[float, tuple[MultiViewINR, TrainReport]] = {}
    points = []
    for lmbda, mult in zip(config.lmbdas, multipliers):
        if mult not in stage1:
            model = MultiViewINR(scale_widths(model_config, mult), seed=config.seed)
            report = train_stage1(video, model, config)
            stage1[mult] = (model, report)
        base, base_report = stage1[mult]
        model = copy.deepcopy(base)
        report = TrainReport(epochs=list(base_report.epochs))
        info = dict(side_info or {}, lmbda=lmbda)
        _, encoded, report = train_stage2(video, model, config, lmbda, report, info)
        points.append(RatePoint(lmbda, model, encoded, report))
        log.info("lambda=%g: %d bytes, %.2f dB", lmbda, len(encoded.data), report.psnr)
    return points
