"""Gaussian rate model over quantised parameters.

Each regularised tensor is modelled by a factorised Gaussian whose mean and
standard deviation are recomputed from the tensor itself. A symbol's
probability is the Gaussian mass of its quantisation bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import ndtr

from .quantization import reconstruct, symbolize
from .rangecoder import TOTAL_FREQ, FrequencyTable

STD_FLOOR = 1e-6
P_MIN = 2.0 ** -16
SUPPORT_HALF_WIDTH = 64


@dataclass(frozen=True)
class GaussianStats:
    mean: float
    std: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std)):
            raise ValueError(f"non-finite Gaussian statistics ({self.mean}, {self.std})")
        if self.std < STD_FLOOR:
            object.__setattr__(self, "std", STD_FLOOR)

    def as_float32(self) -> "GaussianStats":
        return GaussianStats(float(np.float32(self.mean)), float(np.float32(self.std)))


def fit_gaussian(symbols, step) -> GaussianStats:
    """Population mean and standard deviation of the reconstructed values ``step * symbols``."""
    values = np.asarray(reconstruct(np.asarray(symbols), np.asarray(step)), dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot fit a Gaussian to an empty group")
    return GaussianStats(float(values.mean()), max(float(values.std()), STD_FLOOR))


def gaussian_moments(values: torch.Tensor):
    """Differentiable (mean, floored population std) of a tensor."""
    mean = values.mean()
    std = (values - mean).pow(2).mean().sqrt().clamp_min(STD_FLOOR)
    return mean, std


def bin_probability(value, step, mean, std, p_min: float = P_MIN):
    """Gaussian mass of the bin ``[value - step/2, value + step/2]``, floored at ``p_min``.

    Accepts numpy arrays/scalars or torch tensors (differentiable). The bin is
    folded onto the lower tail so that far-out bins keep their precision.
    """
    if isinstance(value, torch.Tensor):
        c = -(value - mean).abs()
        half = step / 2
        p = torch.special.ndtr((c + half) / std) - torch.special.ndtr((c - half) / std)
        return p.clamp_min(p_min)
    c = -np.abs(np.asarray(value, dtype=np.float64) - mean)
    half = np.asarray(step, dtype=np.float64) / 2
    p = ndtr((c + half) / std) - ndtr((c - half) / std)
    return np.maximum(p, p_min)


def symbol_probability(symbols, step, stats: GaussianStats):
    return bin_probability(np.asarray(symbols) * np.asarray(step, dtype=np.float64), step,
                           stats.mean, stats.std)


def support_bounds(step, mean: float, half_width: int = SUPPORT_HALF_WIDTH):
    """Integer support ``[mean/step - w, mean/step + w]`` rounded outward, per step value."""
    centre = mean / np.asarray(step, dtype=np.float64)
    return (np.floor(centre - half_width).astype(np.int64),
            np.ceil(centre + half_width).astype(np.int64))


def quantize_frequencies(probs: np.ndarray, total: int = TOTAL_FREQ) -> np.ndarray:
    """Integer frequencies summing exactly to ``total``, each at least 1."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.size
    if n > total:
        raise ValueError(f"{n} symbols do not fit a {total} frequency budget")
    raw = probs / probs.sum() * total
    freqs = np.maximum(np.floor(raw).astype(np.int64), 1)
    short = total - int(freqs.sum())
    if short > 0:
        order = np.argsort(-(raw - np.floor(raw)), kind="stable")
        freqs[order[:short]] += 1
    while short < 0:
        i = int(np.argmax(freqs))
        take = min(-short, int(freqs[i]) - 1)
        freqs[i] -= take
        short += take
    return freqs


def frequency_table(step: float, stats: GaussianStats,
                    half_width: int = SUPPORT_HALF_WIDTH) -> FrequencyTable:
    lo, hi = support_bounds(step, stats.mean, half_width)
    lo, hi = int(lo), int(hi)
    symbols = np.arange(lo, hi + 1)
    probs = symbol_probability(symbols, step, stats)
    return FrequencyTable(lo, quantize_frequencies(probs))


def relaxed_rate_bits(values: torch.Tensor, step: torch.Tensor,
                      generator: torch.Generator | None = None, noise=None) -> torch.Tensor:
    """Training-mode code length (bits) of one tensor under additive uniform noise.

    ``values + step * u`` with ``u ~ U(-1/2, 1/2)`` stands in for the
    quantised values; the Gaussian is refitted to the noisy values.
    """
    if noise is None:
        noise = torch.rand(values.shape, generator=generator, dtype=values.dtype) - 0.5
    noisy = values + step * noise
    mean, std = gaussian_moments(noisy)
    p = bin_probability(noisy, step, mean, std)
    return -torch.log2(p).sum()


def quantized_rate_bits(values: torch.Tensor, step: torch.Tensor) -> torch.Tensor:
    """Evaluation-mode code length (bits) of one tensor's quantised values."""
    with torch.no_grad():
        q = quantize_tensor(values.detach().cpu().numpy(), step.detach().cpu().numpy())
    return torch.tensor(q.rate_bits())


@dataclass
class QuantizedTensor:
    """Clamped integer symbols of one tensor plus what is needed to code them."""

    symbols: np.ndarray
    step: np.ndarray  # float32, broadcastable to symbols
    stats: GaussianStats  # float32-representable
    lo: np.ndarray
    hi: np.ndarray

    def dequantize(self) -> np.ndarray:
        return (self.symbols.astype(np.float32) * self.step).astype(np.float32)

    def unit_index(self) -> np.ndarray:
        """Index into the flattened step tensor for every flattened symbol."""
        ids = np.arange(self.step.size).reshape(self.step.shape)
        return np.broadcast_to(ids, self.symbols.shape).reshape(-1)

    def probabilities(self) -> np.ndarray:
        step = np.broadcast_to(self.step.astype(np.float64), self.symbols.shape)
        return symbol_probability(self.symbols, step, self.stats)

    def rate_bits(self) -> float:
        return float(-np.log2(self.probabilities()).sum())

    def tables(self) -> list[FrequencyTable]:
        return [frequency_table(float(d), self.stats) for d in self.step.reshape(-1)]


def quantize_tensor(values: np.ndarray, step: np.ndarray, max_refits: int = 16) -> QuantizedTensor:
    """Symbolise with float32 step sizes, fit the Gaussian, clamp symbols into support.

    Clamping moves the mean, which moves the support, so fit and clamp are
    repeated until the symbols stop changing. At that fixed point the stats
    describe the coded symbols themselves and re-quantising the decoded
    values reproduces the same tensor.
    """
    step32 = np.asarray(step, dtype=np.float32)
    step64 = step32.astype(np.float64)
    symbols = symbolize(np.asarray(values, dtype=np.float32).astype(np.float64), step64)
    for _ in range(max_refits):
        stats = fit_gaussian(symbols, step64).as_float32()
        lo, hi = support_bounds(step32, stats.mean)
        clamped = np.clip(symbols, lo, hi)
        if np.array_equal(clamped, symbols):
            break
        symbols = clamped
    return QuantizedTensor(symbols, step32, stats, lo, hi)


def rd_loss(rate, distortion, lmbda: float):
    """Lagrangian cost ``rate + lmbda * distortion``."""
    return rate + lmbda * distortion
