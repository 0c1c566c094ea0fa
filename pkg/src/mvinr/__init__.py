"""Neural multi-view RGBD video codec.

A set of per-view feature grids and one shared convolutional decoder are
overfitted to a multi-view texture+depth sequence; the quantised, entropy
coded parameters form the bitstream.
"""

from .bitstream import (BitstreamError, DecodedModel, EncodedModel, deserialize_model,
                        read_bitstream, serialize_model, write_bitstream)
from .config import CodecConfig, ConfigError, ModelConfig, TrainConfig
from .data_io import (DecodeError, MultiViewVideo, PatchBatch, PatchIndex, RawSequenceSpec,
                      SequenceManifest, SequenceSpecError, load_sequence, sample_patch_batch)
from .entropy import rd_loss
from .estimator import MultiViewCodec, check_patch_indices, check_video
from .metrics import RDCurve, bd_rate, psnr, yuv_psnr
from .model import MultiViewINR, parameter_census
from .quantization import ModelQuantizer, reconstruct, symbolize
from .training import encode_video, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "BitstreamError", "CodecConfig", "ConfigError", "DecodeError", "DecodedModel",
    "EncodedModel", "ModelConfig", "ModelQuantizer", "MultiViewCodec", "MultiViewINR",
    "MultiViewVideo", "PatchBatch", "PatchIndex", "RDCurve", "RawSequenceSpec",
    "SequenceManifest", "SequenceSpecError", "TrainConfig", "bd_rate", "check_patch_indices",
    "check_video", "deserialize_model", "encode_video", "load_sequence", "parameter_census",
    "psnr", "rd_loss", "read_bitstream", "reconstruct", "sample_patch_batch",
    "serialize_model", "symbolize", "train_stage1", "train_stage2", "write_bitstream",
    "yuv_psnr",
]
