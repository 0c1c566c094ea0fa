"""Multi-view patch representation: per-view feature grids, shared decoder.

Every view owns a set of base grids (several temporal resolutions) and one
compact hierarchical grid per upsampling block. The stem, blocks and head
are stored once and used for all views.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig

GRID_INIT_SCALE = 1e-2


def _axis_weights(pos: torch.Tensor, src_len: int, grid_len: int):
    """Endpoint-aligned linear interpolation indices along one axis.

    ``pos`` holds integer sample positions in ``[0, src_len)``; returns the
    lower knot, upper knot and the weight of the upper knot.
    """
    if grid_len == 1 or src_len == 1:
        zero = torch.zeros_like(pos)
        return zero, zero, torch.zeros(pos.shape, dtype=torch.float64)
    c = pos.to(torch.float64) * (grid_len - 1) / (src_len - 1)
    lo = c.floor().long().clamp(0, grid_len - 2)
    return lo, lo + 1, c - lo


def interpolate_time(grids: torch.Tensor, frames: torch.Tensor, frame_count: int) -> torch.Tensor:
    """Linear temporal interpolation of per-sample grids [B, Tg, ...] -> [B, ...]."""
    b = torch.arange(grids.shape[0])
    t0, t1, w = _axis_weights(frames, frame_count, grids.shape[1])
    w = w.to(grids.dtype).view(-1, *([1] * (grids.dim() - 2)))
    return grids[b, t0] * (1 - w) + grids[b, t1] * w


def interpolate_base(grids: list[torch.Tensor], frames: torch.Tensor, rows: torch.Tensor,
                     cols: torch.Tensor, frame_count: int, height: int, width: int) -> torch.Tensor:
    """Trilinear sampling of base grids at stage-0 sample positions.

    ``grids`` are per-sample tensors [B, Tg, Hg, Wg, Cg]; ``rows`` [B, h] and
    ``cols`` [B, w] are stage-0 positions already clamped to the frame of
    size ``height`` x ``width``. Returns [B, h, w, sum(Cg)].
    """
    out = []
    b = torch.arange(rows.shape[0])
    for g in grids:
        plane = interpolate_time(g, frames, frame_count)  # [B, Hg, Wg, C]
        y0, y1, wy = _axis_weights(rows, height, plane.shape[1])
        x0, x1, wx = _axis_weights(cols, width, plane.shape[2])
        wy = wy.to(plane.dtype)[:, :, None, None]
        wx = wx.to(plane.dtype)[:, None, :, None]
        bi = b[:, None]
        rowmix = plane[bi, y0] * (1 - wy) + plane[bi, y1] * wy  # [B, h, Wg, C]
        bj = b[:, None, None]
        hi = torch.arange(rows.shape[1])[None, :, None]
        left = rowmix[bj, hi, x0[:, None, :]]
        right = rowmix[bj, hi, x1[:, None, :]]
        out.append(left * (1 - wx) + right * wx)
    return torch.cat(out, dim=-1)


class ViewGridSet(nn.Module):
    """Feature grids private to one view."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        hg, wg = config.base_grid_height, config.base_grid_width
        self.base = nn.ParameterList([
            nn.Parameter(torch.empty(t, hg, wg, c))
            for t, c in zip(config.base_grid_frames, config.base_grid_channels)])
        self.hier = nn.ParameterList([
            nn.Parameter(torch.empty(config.hier_grid_frames, f, f, config.hier_grid_channels))
            for f in config.upsample_factors])
        for p in self.parameters():
            nn.init.uniform_(p, -GRID_INIT_SCALE, GRID_INIT_SCALE)


class ConvNeXtTransform(nn.Module):
    def __init__(self, channels: int, kernel_size: int, expansion: int):
        super().__init__()
        self.dwconv = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2,
                                groups=channels)
        self.norm = nn.LayerNorm(channels)
        self.pw1 = nn.Linear(channels, expansion * channels)
        self.pw2 = nn.Linear(expansion * channels, channels)

    def forward(self, x):
        y = self.dwconv(x).permute(0, 2, 3, 1)
        y = self.pw2(F.gelu(self.pw1(self.norm(y))))
        return x + y.permute(0, 3, 1, 2)


class Upsampler(nn.Module):
    """Pointwise projection to factor**2 channel groups, then channel-to-space."""

    def __init__(self, in_channels: int, out_channels: int, factor: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels * factor * factor, 1)
        self.shuffle = nn.PixelShuffle(factor)

    def forward(self, x):
        return self.shuffle(self.proj(x))


class Block(nn.Module):
    def __init__(self, in_channels, out_channels, factor, enc_channels, kernel_size, expansion):
        super().__init__()
        self.factor = factor
        self.upsample = Upsampler(in_channels, out_channels, factor)
        self.enc = nn.Linear(enc_channels, out_channels)
        self.transform = ConvNeXtTransform(out_channels, kernel_size, expansion)

    def encoding(self, local: torch.Tensor, height: int, width: int) -> torch.Tensor:
        """Project a per-cell encoding [B, f, f, Ce] and tile it to ``height`` x ``width``."""
        f = self.factor
        e = self.enc(local).permute(0, 3, 1, 2)
        return e.repeat(1, 1, height // f, width // f)

    def forward(self, x, local):
        up = self.upsample(x)
        return self.transform(up + self.encoding(local, up.shape[2], up.shape[3]))


class SharedBackbone(nn.Module):
    """Stem, upsampling blocks and linear head shared by every view."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.channels
        self.stem = nn.Conv2d(sum(config.base_grid_channels), c[0], config.stem_kernel,
                              padding=config.stem_kernel // 2)
        self.blocks = nn.ModuleList([
            Block(c[n], c[n + 1], f, config.hier_grid_channels, config.block_kernel,
                  config.expansion)
            for n, f in enumerate(config.upsample_factors)])
        self.head = nn.Linear(c[-1], config.output_channels)


def _hier_local(grid: torch.Tensor, factor: int) -> torch.Tensor:
    """Sample a hierarchical grid [B, L, L, C] at the ``factor`` cell positions."""
    size = grid.shape[1]
    if size == factor:
        return grid
    pos = torch.arange(factor)
    l0, l1, w = _axis_weights(pos, factor, size)
    w = w.to(grid.dtype)
    rows = grid[:, l0] * (1 - w)[None, :, None, None] + grid[:, l1] * w[None, :, None, None]
    return rows[:, :, l0] * (1 - w)[None, None, :, None] + rows[:, :, l1] * w[None, None, :, None]


class MultiViewINR(nn.Module):
    """K per-view grid sets feeding one shared stem/blocks/head decoder.

    Call with an int64 tensor of patch indices [B, 4] holding
    (view, frame, row, col); returns RGBD patches [B, M, M, 4]. Outputs are
    clamped to [0, 1] in eval mode only.
    """

    def __init__(self, config: ModelConfig, seed: int | None = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            self.backbone = SharedBackbone(config)
            self.views = nn.ModuleList([ViewGridSet(config) for _ in range(config.view_count)])

    # -- evaluation ---------------------------------------------------------

    def _stacked(self, attr: str, i: int, views: torch.Tensor) -> torch.Tensor:
        stack = torch.stack([getattr(v, attr)[i] for v in self.views])
        return stack[views]

    def forward_region(self, views, frames, top, left, height, width, overlap=None):
        """Evaluate regions given in stage-0 samples, cropping the overlap margin.

        ``views``, ``frames``, ``top`` and ``left`` are int64 tensors [B];
        ``height``/``width`` are the region size in stage-0 samples.
        Returns [B, height * U, width * U, C] with U the total upsampling.
        """
        cfg = self.config
        p = cfg.overlap if overlap is None else overlap
        h0, w0 = cfg.stage0_height, cfg.stage0_width
        span_y = torch.arange(-p, height + p)
        span_x = torch.arange(-p, width + p)
        rows = (top[:, None] + span_y[None]).clamp(0, h0 - 1)
        cols = (left[:, None] + span_x[None]).clamp(0, w0 - 1)
        grids = [self._stacked("base", g, views) for g in range(len(self.views[0].base))]
        enc = interpolate_base(grids, frames, rows, cols, cfg.frame_count, h0, w0)
        x = self.backbone.stem(enc.permute(0, 3, 1, 2))
        for n, block in enumerate(self.backbone.blocks):
            hier = interpolate_time(self._stacked("hier", n, views), frames, cfg.frame_count)
            x = block(x, _hier_local(hier, block.factor))
        y = self.backbone.head(x.permute(0, 2, 3, 1))
        margin = p * cfg.total_upsampling
        if margin:
            y = y[:, margin:y.shape[1] - margin, margin:y.shape[2] - margin]
        if not self.training:
            y = y.clamp(0.0, 1.0)
        return y

    def forward(self, indices: torch.Tensor) -> torch.Tensor:
        indices = torch.as_tensor(indices, dtype=torch.long).reshape(-1, 4)
        s = self.config.stem_resolution
        return self.forward_region(indices[:, 0], indices[:, 1], indices[:, 2] * s,
                                   indices[:, 3] * s, s, s)

    @torch.no_grad()
    def forward_frame(self, view: int, frame: int, batch_size: int = 16) -> torch.Tensor:
        """Decode one full frame [H, W, C] by stitching overlapped patches."""
        cfg = self.config
        m = cfg.patch_size
        rows, cols = cfg.patch_rows, cfg.patch_cols
        idx = torch.tensor([(view, frame, j, i) for j in range(rows) for i in range(cols)])
        out = torch.empty(cfg.height, cfg.width, cfg.output_channels)
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            patches = self(chunk)
            for (_, _, j, i), patch in zip(chunk.tolist(), patches):
                out[j * m:(j + 1) * m, i * m:(i + 1) * m] = patch
        return out

    @torch.no_grad()
    def forward_whole_frame(self, view: int, frame: int) -> torch.Tensor:
        """Evaluate a frame as one region; reference for :meth:`forward_frame`."""
        cfg = self.config
        z = torch.zeros(1, dtype=torch.long)
        y = self.forward_region(z + view, z + frame, z, z, cfg.stage0_height, cfg.stage0_width)
        return y[0]

    @torch.no_grad()
    def reconstruct(self) -> torch.Tensor:
        """Decode the whole video as [K, T, H, W, C]."""
        cfg = self.config
        return torch.stack([
            torch.stack([self.forward_frame(k, t) for t in range(cfg.frame_count)])
            for k in range(cfg.view_count)])

    # -- parameter bookkeeping ----------------------------------------------

    def view_of(self, name: str) -> int | None:
        """View index owning parameter ``name``, or None for shared parameters."""
        if name.startswith("views."):
            return int(name.split(".")[1])
        return None


def is_grid(name: str) -> bool:
    return name.startswith("views.")


@dataclass
class Census:
    counts: "OrderedDict[str, int]"
    owners: "OrderedDict[str, int | None]"

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def shared(self) -> int:
        return sum(c for n, c in self.counts.items() if self.owners[n] is None)

    def per_view(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for n, c in self.counts.items():
            k = self.owners[n]
            if k is not None:
                out[k] = out.get(k, 0) + c
        return out

    def fractions(self) -> dict[str, float]:
        total = self.total
        out = {"shared": self.shared / total}
        for k, c in sorted(self.per_view().items()):
            out[f"view{k}"] = c / total
        return out


def parameter_census(model: MultiViewINR) -> Census:
    """Parameter counts per tensor, tagged shared (None) or with the owning view."""
    counts, owners = OrderedDict(), OrderedDict()
    for name, p in model.named_parameters():
        counts[name] = p.numel()
        owners[name] = model.view_of(name)
    return Census(counts, owners)
