"""Quality metrics and Bjøntegaard delta rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data_io import YUVFrame

YUV_WEIGHTS = (6.0, 1.0, 1.0)


class BDRateError(ValueError):
    pass


def mse(reference, test) -> float:
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(reference, test, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give ``inf``."""
    err = mse(reference, test)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def rgbd_psnr(reference, test) -> float:
    return psnr(reference, test, 1.0)


def yuv_psnr(reference: Sequence[YUVFrame], test: Sequence[YUVFrame]) -> dict[str, float]:
    """Per-plane PSNR over a sequence and the 6:1:1 weighted combination."""
    if len(reference) != len(test):
        raise ValueError(f"frame count mismatch: {len(reference)} vs {len(test)}")
    bd = reference[0].bit_depth
    peak = float((1 << bd) - 1)
    out = {}
    for plane in ("y", "u", "v"):
        ref = np.stack([getattr(f, plane) for f in reference])
        tst = np.stack([getattr(f, plane) for f in test])
        out[plane] = psnr(ref, tst, peak)
    w = YUV_WEIGHTS
    vals = [out["y"], out["u"], out["v"]]
    out["yuv"] = (math.inf if any(math.isinf(v) for v in vals)
                  else sum(wi * v for wi, v in zip(w, vals)) / sum(w))
    return out


def depth_psnr(reference, test, bit_depth: int = 16) -> float:
    return psnr(reference, test, float((1 << bit_depth) - 1))


@dataclass(frozen=True)
class RDPoint:
    rate: float
    quality: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if math.isnan(self.quality):
            raise ValueError("quality is NaN")


@dataclass
class RDCurve:
    points: list[RDPoint] = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.rate)
        rates = [p.rate for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"curve {self.label!r}: rates must be strictly increasing")

    @classmethod
    def from_arrays(cls, rates, qualities, label: str = "") -> "RDCurve":
        return cls([RDPoint(float(r), float(q)) for r, q in zip(rates, qualities)], label)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])


def _log_rate_fit(curve: RDCurve) -> np.ndarray:
    if len(curve.points) < 2:
        raise BDRateError(f"curve {curve.label!r} needs at least 2 points")
    q = curve.qualities
    if not np.isfinite(q).all():
        raise BDRateError(f"curve {curve.label!r} has non-finite quality values")
    return np.polyfit(q, np.log(curve.rates), min(3, len(q) - 1))


def overlap_interval(anchor: RDCurve, test: RDCurve) -> tuple[float, float]:
    lo = max(anchor.qualities.min(), test.qualities.min())
    hi = min(anchor.qualities.max(), test.qualities.max())
    if not hi > lo:
        raise BDRateError(
            f"quality ranges of {anchor.label!r} and {test.label!r} do not overlap")
    return float(lo), float(hi)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average rate difference (percent) of ``test`` over ``anchor`` at equal quality.

    Log-rate is fitted as a polynomial (cubic with four or more points) of
    quality and integrated over the shared quality interval. Negative values
    mean ``test`` needs fewer bits.
    """
    pa, pt = _log_rate_fit(anchor), _log_rate_fit(test)
    lo, hi = overlap_interval(anchor, test)
    ia, it = np.polyint(pa), np.polyint(pt)
    area_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    area_t = np.polyval(it, hi) - np.polyval(it, lo)
    return float((math.exp((area_t - area_a) / (hi - lo)) - 1.0) * 100.0)
