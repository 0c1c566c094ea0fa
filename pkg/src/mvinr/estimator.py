"""scikit-learn style wrapper around the two-stage encoder.

``fit`` encodes a video (trains the representation and entropy-codes it),
``predict`` decodes patches from their indices and ``transform`` decodes the
whole video.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .bitstream import deserialize_model
from .config import ModelConfig, TrainConfig
from .data_io import MultiViewVideo, SequenceSpecError
from .metrics import rgbd_psnr
from .model import MultiViewINR
from .training import TrainReport, train_stage1, train_stage2


def check_video(X) -> MultiViewVideo:
    """Coerce ``X`` to a :class:`MultiViewVideo` with finite samples in [0, 1]."""
    if isinstance(X, MultiViewVideo):
        video = X
    else:
        arr = np.asarray(X, dtype=np.float32)
        if arr.ndim == 4:
            arr = arr[None]
        video = MultiViewVideo(arr)
    s = video.samples
    if not np.isfinite(s).all():
        raise SequenceSpecError("video contains non-finite samples")
    if s.size and (s.min() < 0.0 or s.max() > 1.0):
        raise SequenceSpecError(
            f"samples must lie in [0, 1], got range [{s.min():.4g}, {s.max():.4g}]")
    return video


def check_patch_indices(X, config: ModelConfig) -> np.ndarray:
    """Validate an [N, 4] array of (view, frame, row, col) against a model geometry."""
    idx = np.asarray(X)
    if idx.ndim == 1 and idx.size == 4:
        idx = idx[None]
    if idx.ndim != 2 or idx.shape[1] != 4:
        raise ValueError(f"patch indices must be [N, 4], got {idx.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        if not np.array_equal(idx, np.round(idx)):
            raise ValueError("patch indices must be integers")
    idx = idx.astype(np.int64)
    limits = (config.view_count, config.frame_count, config.patch_rows, config.patch_cols)
    for axis, (name, hi) in enumerate(zip(("view", "frame", "row", "col"), limits)):
        col = idx[:, axis]
        if col.size and (col.min() < 0 or col.max() >= hi):
            raise ValueError(f"{name} index out of range [0, {hi})")
    return idx


class MultiViewCodec(BaseEstimator):
    """Neural multi-view RGBD codec with a shared decoder and per-view grids.

    Parameters mirror :class:`TrainConfig` plus a few architecture knobs;
    ``model_params`` passes any other :class:`ModelConfig` field through.

    Attributes set by ``fit``: ``model_`` (decoder-side model),
    ``bitstream_`` (bytes), ``report_`` and ``config_``.
    """

    def __init__(self, lmbda=1e9, stage1_epochs=300, stage2_epochs=60, learning_rate=2e-3,
                 stage2_param_lr_scale=0.01, stage2_step_lr_scale=1.0, batch_size=8,
                 noise_start=0.1, noise_end=1.0, quant_width=7, patch_size=32, overlap=4,
                 model_params=None, seed=0):
        self.lmbda = lmbda
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.learning_rate = learning_rate
        self.stage2_param_lr_scale = stage2_param_lr_scale
        self.stage2_step_lr_scale = stage2_step_lr_scale
        self.batch_size = batch_size
        self.noise_start = noise_start
        self.noise_end = noise_end
        self.quant_width = quant_width
        self.patch_size = patch_size
        self.overlap = overlap
        self.model_params = model_params
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            stage1_epochs=self.stage1_epochs, stage2_epochs=self.stage2_epochs,
            lmbdas=(self.lmbda,), learning_rate=self.learning_rate,
            stage2_param_lr_scale=self.stage2_param_lr_scale,
            stage2_step_lr_scale=self.stage2_step_lr_scale, batch_size=self.batch_size,
            seed=self.seed, noise_start=self.noise_start, noise_end=self.noise_end,
            quant_width=self.quant_width)

    def _model_config(self, video: MultiViewVideo) -> ModelConfig:
        extra = dict(self.model_params or {})
        extra.setdefault("patch_size", self.patch_size)
        ups = math.prod(extra.get("upsample_factors", ModelConfig.upsample_factors))
        extra.setdefault("stem_resolution", self.patch_size // ups)
        extra.setdefault("overlap", self.overlap)
        return ModelConfig.for_video(video.view_count, video.frame_count, video.height,
                                     video.width, **extra)

    def fit(self, X, y=None, side_info=None):
        video = check_video(X)
        train = self._train_config()
        config = self._model_config(video)
        model = MultiViewINR(config, seed=self.seed)
        report = train_stage1(video, model, train, TrainReport())
        _, encoded, report = train_stage2(video, model, train, self.lmbda, report, side_info)
        self.config_ = config
        self.report_ = report
        self.bitstream_ = encoded.data
        self.depth_range_ = video.depth_range
        self.model_ = model.eval()
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def predict(self, X) -> np.ndarray:
        """Decode RGBD patches [N, M, M, 4] for patch indices ``X`` [N, 4]."""
        self._check_fitted()
        idx = check_patch_indices(X, self.config_)
        with torch.no_grad():
            return self.model_(torch.from_numpy(idx)).numpy()

    def transform(self, X=None) -> np.ndarray:
        """Decoded video [K, T, H, W, 4]; ``X`` is accepted for pipeline compatibility."""
        self._check_fitted()
        return self.model_.reconstruct().numpy()

    def score(self, X, y=None) -> float:
        """RGBD PSNR (dB) of the decoded video against ``X``."""
        video = check_video(X)
        return rgbd_psnr(video.samples, self.transform())

    @property
    def bits_per_pixel_(self) -> float:
        self._check_fitted()
        c = self.config_
        return 8 * len(self.bitstream_) / (c.view_count * c.frame_count * c.height * c.width)

    def to_bytes(self) -> bytes:
        self._check_fitted()
        return self.bitstream_

    @classmethod
    def from_bytes(cls, data: bytes) -> "MultiViewCodec":
        """Decoder-only estimator rebuilt from a bitstream."""
        decoded = deserialize_model(data)
        est = cls(patch_size=decoded.model.config.patch_size,
                  overlap=decoded.model.config.overlap)
        est.config_ = decoded.model.config
        est.model_ = decoded.model
        est.bitstream_ = bytes(data)
        est.depth_range_ = decoded.depth_range
        est.report_ = None
        return est
