"""Learned uniform quantisation with log-domain step sizes and Quant-Noise."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from torch import nn

STEP_FLOOR = 1e-8
DEFAULT_WIDTH = 7


class QuantizationError(ValueError):
    pass


class Sharing(str, Enum):
    PER_ROW = "per_row"
    PER_COLUMN = "per_column"
    PER_TENSOR = "per_tensor"


def step_shape(shape: tuple[int, ...], sharing: Sharing | str) -> tuple[int, ...]:
    """Shape of the step-size tensor for ``shape`` under a sharing pattern."""
    sharing = Sharing(sharing)
    ndim = len(shape)
    if sharing is Sharing.PER_TENSOR or ndim == 0:
        return (1,) * max(ndim, 1)
    if sharing is Sharing.PER_ROW:
        return (shape[0],) + (1,) * (ndim - 1)
    if ndim < 2:
        raise QuantizationError("per_column sharing needs a tensor with >= 2 dims")
    return (1, shape[1]) + (1,) * (ndim - 2)


TIE_ULPS = 8


def round_half_even(x):
    """Round to nearest, ties to even; quotients within a few ulps of .5 count as ties."""
    if isinstance(x, torch.Tensor):
        eps = torch.finfo(x.dtype).eps
        f = torch.floor(x)
        tie = (x - f - 0.5).abs() <= TIE_ULPS * eps * x.abs().clamp_min(1.0)
        return torch.where(tie, f + torch.remainder(f, 2), torch.round(x))
    x = np.asarray(x)
    eps = np.finfo(x.dtype if x.dtype.kind == "f" else np.float64).eps
    f = np.floor(x)
    tie = np.abs(x - f - 0.5) <= TIE_ULPS * eps * np.maximum(np.abs(x), 1.0)
    return np.where(tie, f + np.mod(f, 2), np.rint(x))


def symbolize(theta, step, name: str = "tensor"):
    """Integer symbols ``round_half_even(theta / step)``.

    Works on numpy arrays or torch tensors; ``step`` must broadcast to
    ``theta``.
    """
    if isinstance(theta, torch.Tensor):
        if not torch.isfinite(theta).all():
            raise QuantizationError(f"non-finite values in {name}")
        return round_half_even(theta / step).to(torch.int64)
    theta = np.asarray(theta, dtype=np.float64)
    if not np.isfinite(theta).all():
        raise QuantizationError(f"non-finite values in {name}")
    return round_half_even(theta / step).astype(np.int64)


def reconstruct(symbols, step):
    if isinstance(symbols, torch.Tensor):
        return symbols.to(step.dtype) * step
    return np.asarray(symbols) * step


def init_step_sizes(values: torch.Tensor, sharing: Sharing | str = Sharing.PER_TENSOR,
                    width: int = DEFAULT_WIDTH) -> torch.Tensor:
    """Log step sizes putting each sharing unit's largest value at ``2**(width-1)`` steps."""
    shape = step_shape(tuple(values.shape), sharing)
    v = values.detach().abs()
    if v.dim() == 0:
        v = v.reshape(1)
    reduce_dims = [d for d, s in enumerate(shape) if s == 1 and v.shape[d] != 1]
    peak = v.amax(dim=reduce_dims, keepdim=True) if reduce_dims else v
    step = (peak / 2 ** (width - 1)).clamp_min(STEP_FLOOR)
    return torch.log(step.reshape(shape))


@dataclass
class QuantNoiseState:
    noise_rate: float = 1.0
    generator: torch.Generator = field(default_factory=torch.Generator)

    def __post_init__(self):
        if not 0.0 <= self.noise_rate <= 1.0:
            raise QuantizationError(f"noise rate {self.noise_rate} outside [0, 1]")


def fake_quantize(theta: torch.Tensor, step: torch.Tensor, lo=None, hi=None) -> torch.Tensor:
    """``step * round(theta / step)`` with a straight-through rounding gradient.

    The gradient w.r.t. ``theta`` is exactly 1; the step size receives the
    usual ``round(x) - x`` gradient. Optional ``lo``/``hi`` clamp the symbols.
    """
    x = theta / step
    s = round_half_even(x.detach())
    if lo is not None:
        s = torch.maximum(torch.minimum(s, hi), lo)
    return (x + (s - x).detach()) * step


def quant_noise_apply(theta: torch.Tensor, step: torch.Tensor, state: QuantNoiseState | None,
                      training: bool = True, lo=None, hi=None) -> torch.Tensor:
    """Quantise a random subset of elements (training) or all of them (evaluation)."""
    q = fake_quantize(theta, step, lo, hi)
    if not training or state is None:
        return q
    rate = state.noise_rate
    if rate >= 1.0:
        return q
    if rate <= 0.0:
        return theta
    mask = torch.rand(theta.shape, generator=state.generator) < rate
    return torch.where(mask, q, theta)


@dataclass
class ParamGroup:
    """One quantisable tensor of a model and its step-size state."""

    name: str
    values: torch.Tensor
    log_step: torch.Tensor | None
    sharing: Sharing
    regularized: bool

    @property
    def step(self) -> torch.Tensor:
        return torch.exp(self.log_step)


def default_sharing(name: str, param: torch.Tensor) -> tuple[bool, Sharing]:
    """Grids and linear/conv weights are quantised; biases and norms stay raw."""
    if name.startswith("views."):
        return True, Sharing.PER_TENSOR
    if name.endswith(".weight") and param.dim() >= 2 and ".norm." not in name:
        return True, Sharing.PER_ROW
    return False, Sharing.PER_TENSOR


def _key(name: str) -> str:
    return name.replace(".", "__")


class ModelQuantizer(nn.Module):
    """Holds the trainable log step sizes for every regularised parameter of a model."""

    def __init__(self, model: nn.Module, width: int = DEFAULT_WIDTH, sharing_for=default_sharing):
        super().__init__()
        self.width = width
        self.names: list[str] = []
        self.raw_names: list[str] = []
        self.sharing: dict[str, Sharing] = {}
        self.log_steps = nn.ParameterDict()
        for name, p in model.named_parameters():
            regularized, sharing = sharing_for(name, p)
            if regularized:
                self.names.append(name)
                self.sharing[name] = sharing
                self.log_steps[_key(name)] = nn.Parameter(init_step_sizes(p, sharing, width))
            else:
                self.raw_names.append(name)

    def reinit(self, model: nn.Module) -> None:
        params = dict(model.named_parameters())
        with torch.no_grad():
            for name in self.names:
                self.log_steps[_key(name)].copy_(
                    init_step_sizes(params[name], self.sharing[name], self.width))

    @torch.no_grad()
    def project(self, model: nn.Module, half_width: int = 2 ** (DEFAULT_WIDTH - 1)) -> None:
        """Raise step sizes so every unit spans at most ``half_width`` steps around the tensor mean."""
        params = dict(model.named_parameters())
        for name in self.names:
            p = params[name].detach()
            dev = (p - p.mean()).abs()
            shape = tuple(self.log_step(name).shape)
            dims = [d for d, s in enumerate(shape) if s == 1 and dev.shape[d] != 1]
            peak = dev.amax(dim=dims, keepdim=True) if dims else dev
            floor = torch.log((peak / half_width).clamp_min(STEP_FLOOR)).reshape(shape)
            self.log_step(name).copy_(torch.maximum(self.log_step(name), floor))

    def log_step(self, name: str) -> torch.Tensor:
        return self.log_steps[_key(name)]

    def step(self, name: str) -> torch.Tensor:
        return torch.exp(self.log_steps[_key(name)])

    def groups(self, model: nn.Module) -> list[ParamGroup]:
        params = dict(model.named_parameters())
        out = [ParamGroup(n, params[n], self.log_step(n), self.sharing[n], True) for n in self.names]
        out += [ParamGroup(n, params[n], None, Sharing.PER_TENSOR, False) for n in self.raw_names]
        return out

