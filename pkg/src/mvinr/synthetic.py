"""Deterministic synthetic multi-view RGBD sequences for tests and demos."""

from __future__ import annotations

import numpy as np

from .data_io import MultiViewVideo, RawSequenceSpec, assemble_rgbd, normalize_depth


def smooth_rgbd(view_count=2, frame_count=8, height=64, width=64, seed=0,
                disparity=2.0, motion=1.0) -> MultiViewVideo:
    """Low-frequency colour fields drifting over time, seen from shifted views.

    View ``k`` sees the scene translated horizontally by ``k * disparity``
    pixels; the scene moves ``motion`` pixels per frame. Depth is a tilted
    plane with a soft bump, normalised jointly over all views.
    """
    rng = np.random.default_rng(seed)
    n_waves = 3
    freqs = rng.uniform(0.5, 2.0, size=(3, n_waves, 2)) * rng.choice([-1, 1], (3, n_waves, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
    amps = rng.uniform(0.05, 0.12, size=(3, n_waves))
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    tex = np.empty((view_count, frame_count, height, width, 3))
    depth = np.empty((view_count, frame_count, height, width))
    for k in range(view_count):
        for t in range(frame_count):
            x = (xx + k * disparity + t * motion) / width
            y = (yy + 0.5 * t * motion) / height
            for c in range(3):
                arg = (2 * np.pi * (freqs[c, :, 0, None, None] * x + freqs[c, :, 1, None, None] * y)
                       + phases[c, :, None, None])
                tex[k, t, ..., c] = 0.5 + (amps[c, :, None, None] * np.sin(arg)).sum(0)
            bump = np.exp(-((x - 0.5) ** 2 + (y - 0.5) ** 2) / 0.08)
            depth[k, t] = 1000.0 + 800.0 * x + 300.0 * y + 500.0 * bump
    tex = np.clip(tex, 0.0, 1.0)
    norm, depth_range = normalize_depth(depth)
    return assemble_rgbd(tex, norm, depth_range)


def raw_spec_for(video: MultiViewVideo, bit_depth: int = 8) -> RawSequenceSpec:
    return RawSequenceSpec(width=video.width, height=video.height,
                           frame_count=video.frame_count, view_count=video.view_count,
                           bit_depth=bit_depth)
