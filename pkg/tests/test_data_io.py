import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvinr.data_io import (DecodeError, MultiViewVideo, RawSequenceSpec, SequenceManifest,
                           SequenceSpecError, ViewFiles, YUVFrame, all_patch_indices,
                           assemble_rgbd, crop_patch, denormalize_depth, encode_depth16,
                           encode_yuv420, iter_epoch_batches, load_depth16, load_sequence,
                           load_yuv420, normalize_depth, patch_grid, rgb_to_yuv,
                           sample_patch_batch, video_to_raw, write_atomic, yuv_to_rgb)
from mvinr.synthetic import raw_spec_for, smooth_rgbd


def random_frame(rng, h, w, bit_depth):
    peak = (1 << bit_depth) - 1
    return YUVFrame(rng.integers(0, peak + 1, (h, w)), rng.integers(0, peak + 1, (h // 2, w // 2)),
                    rng.integers(0, peak + 1, (h // 2, w // 2)), bit_depth)


# -- raw YUV -----------------------------------------------------------------

def test_tiny_stream_sizes():
    spec = RawSequenceSpec(width=4, height=4, frame_count=2)
    frames = load_yuv420(bytes(range(48)), spec)
    assert len(frames) == 2
    assert frames[0].y.shape == (4, 4) and frames[0].u.shape == (2, 2)
    assert frames[1].v[1, 1] == 47


def test_truncated_stream_reports_sizes():
    spec = RawSequenceSpec(width=4, height=4, frame_count=2)
    with pytest.raises(DecodeError, match="expected 48 bytes, got 47"):
        load_yuv420(bytes(47), spec)


def test_odd_dimensions_rejected():
    with pytest.raises(SequenceSpecError, match="even"):
        RawSequenceSpec(width=5, height=4, frame_count=1)


@pytest.mark.parametrize("bit_depth", [8, 10])
def test_gradient_frame_write_read_round_trip(bit_depth, tmp_path):
    h, w = 8, 12
    peak = (1 << bit_depth) - 1
    y = (np.add.outer(np.arange(h), np.arange(w)) * peak // (h + w - 2))
    u = np.full((h // 2, w // 2), 1 << (bit_depth - 1))
    frame = YUVFrame(y, u, peak - u, bit_depth)
    spec = RawSequenceSpec(width=w, height=h, frame_count=1, bit_depth=bit_depth)
    path = tmp_path / "f.yuv"
    write_atomic(path, encode_yuv420([frame]))
    back = load_yuv420(path, spec)[0]
    for plane in "yuv":
        np.testing.assert_array_equal(getattr(back, plane), getattr(frame, plane))


def test_ten_bit_overflow_rejected():
    spec = RawSequenceSpec(width=2, height=2, frame_count=1, bit_depth=10)
    data = np.array([1024, 0, 0, 0, 0, 0], dtype="<u2").tobytes()
    with pytest.raises(DecodeError, match="exceeds 10-bit"):
        load_yuv420(data, spec)


def test_skip_frames():
    spec = RawSequenceSpec(width=2, height=2, frame_count=1)
    frames = load_yuv420(bytes(range(18)), spec, frames=1, skip=2)
    assert frames[0].y[0, 0] == 12


def test_depth_round_trip():
    spec = RawSequenceSpec(width=4, height=2, frame_count=3)
    d = np.arange(24).reshape(3, 2, 4) * 2000
    np.testing.assert_array_equal(load_depth16(encode_depth16(d), spec), d)
    with pytest.raises(DecodeError):
        load_depth16(encode_depth16(d)[:-1], spec)


# -- colour ------------------------------------------------------------------

@pytest.mark.parametrize("bit_depth", [8, 10])
def test_neutral_chroma_is_gray(bit_depth, rng):
    f = random_frame(rng, 6, 6, bit_depth)
    neutral = np.full_like(f.u, 1 << (bit_depth - 1))
    rgb = yuv_to_rgb(YUVFrame(f.y, neutral, neutral, bit_depth))
    assert np.allclose(rgb[..., 0], rgb[..., 1]) and np.allclose(rgb[..., 1], rgb[..., 2])


@pytest.mark.parametrize("bit_depth", [8, 10])
def test_limited_range_black_and_white(bit_depth):
    s = 1 << (bit_depth - 8)
    n = np.full((1, 1), 128 * s)
    black = yuv_to_rgb(YUVFrame(np.full((2, 2), 16 * s), n, n, bit_depth))
    white = yuv_to_rgb(YUVFrame(np.full((2, 2), 235 * s), n, n, bit_depth))
    np.testing.assert_allclose(black, 0.0, atol=1e-12)
    np.testing.assert_allclose(white, 1.0, atol=1e-12)


def test_gray_and_white_rgb_give_neutral_chroma():
    gray = rgb_to_yuv(np.full((4, 4, 3), 0.5))
    assert (gray.u == 128).all() and (gray.v == 128).all()
    white = rgb_to_yuv(np.ones((4, 4, 3)))
    assert (white.y == 235).all() and (white.u == 128).all()


def test_bt709_red_primary():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 0] = 1.0
    f = rgb_to_yuv(rgb)
    assert (f.y == 63).all() and (f.u == 102).all() and (f.v == 240).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([8, 10]))
def test_valid_yuv_round_trip_within_one_code(seed, bit_depth):
    # valid frame: decodes inside the RGB gamut, so no clamping happens. Built
    # from 2x2-constant colours plus a per-pixel gray offset (luma-only detail).
    rng = np.random.default_rng(seed)
    block = np.repeat(np.repeat(rng.uniform(0.15, 0.85, (4, 4, 3)), 2, 0), 2, 1)
    rgb = block + rng.uniform(-0.1, 0.1, (8, 8, 1))
    f = rgb_to_yuv(rgb, bit_depth)
    g = rgb_to_yuv(yuv_to_rgb(f), bit_depth)
    for plane in "yuv":
        assert np.abs(getattr(g, plane).astype(int) - getattr(f, plane)).max() <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rgb_to_yuv_is_matrix_inverse_on_smooth_chroma(seed):
    rng = np.random.default_rng(seed)
    rgb = rng.random((8, 8, 3)) * 0.6 + 0.2
    back = yuv_to_rgb(rgb_to_yuv(rgb, 10))
    # 4:2:0 keeps luma detail only; the error is bounded by the chroma spread
    assert np.abs(back - rgb).max() < 0.6


# -- depth -------------------------------------------------------------------

def test_normalize_depth_examples():
    out, rng_ = normalize_depth(np.array([100.0, 300.0, 500.0]))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
    assert rng_ == (100.0, 500.0)
    out, rng_ = normalize_depth(np.full((2, 3), 42))
    assert (out == 0).all() and rng_ == (42.0, 42.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_depth_round_trip_relative(seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(1, 65535, (2, 3, 4, 4))
    norm, r = normalize_depth(d)
    back = denormalize_depth(norm, r)
    assert np.all(np.abs(back - d) <= 1e-6 * np.abs(d))
    assert norm.min() >= 0 and norm.max() <= 1


# -- assembly ----------------------------------------------------------------

def test_assemble_rgbd_shape_and_channel(rng):
    tex = rng.random((2, 3, 4, 4, 3))
    depth, r = normalize_depth(rng.random((2, 3, 4, 4)) * 100)
    v = assemble_rgbd(tex, depth, r)
    assert v.samples.shape == (2, 3, 4, 4, 4)
    np.testing.assert_array_equal(v.samples[..., 3], depth.astype(np.float32))


def test_assemble_rgbd_names_mismatched_dimension(rng):
    with pytest.raises(SequenceSpecError, match="mismatch in T"):
        assemble_rgbd(rng.random((2, 3, 4, 4, 3)), rng.random((2, 2, 4, 4)))


def test_video_rejects_bad_depth_range():
    with pytest.raises(SequenceSpecError):
        MultiViewVideo(np.zeros((1, 1, 2, 2, 4)), (5.0, 1.0))


# -- patches -----------------------------------------------------------------

def test_patch_index_ranges(rng):
    v = MultiViewVideo(np.zeros((2, 2, 64, 64, 4), np.float32))
    b = sample_patch_batch(v, 500, rng, 16)
    arr = b.as_array()
    assert arr[:, 2].max() <= 3 and arr[:, 3].max() <= 3 and arr.min() >= 0


def test_patch_size_must_divide():
    with pytest.raises(SequenceSpecError, match="divide"):
        patch_grid((1, 1, 64, 48), 32)


def test_batch_targets_are_exact_crops(toy_video, rng):
    b = sample_patch_batch(toy_video, 6, rng, 16)
    for idx, target in zip(b.indices, b.targets):
        np.testing.assert_array_equal(target, crop_patch(toy_video.samples, idx, 16))


def test_sampling_deterministic(toy_video):
    a = sample_patch_batch(toy_video, 20, np.random.default_rng(9), 16).as_array()
    b = sample_patch_batch(toy_video, 20, np.random.default_rng(9), 16).as_array()
    np.testing.assert_array_equal(a, b)


def test_sampling_uniform_chi_square():
    v = MultiViewVideo(np.zeros((2, 4, 64, 64, 4), np.float32))
    n = 100_000
    idx = sample_patch_batch(v, n, np.random.default_rng(0), 16).as_array()
    cells = np.ravel_multi_index(idx.T, (2, 4, 4, 4))
    counts = np.bincount(cells, minlength=128)
    p = 1 / 128
    sigma = np.sqrt(n * p * (1 - p))
    assert np.abs(counts - n * p).max() <= 5 * sigma


def test_patches_partition_each_frame(toy_video):
    idx = all_patch_indices(toy_video.shape, 16)
    canvas = np.zeros(toy_video.shape[:4], dtype=int)
    for k, t, j, i in idx:
        canvas[k, t, j * 16:(j + 1) * 16, i * 16:(i + 1) * 16] += 1
    assert (canvas == 1).all()


def test_epoch_covers_every_patch_once(toy_video, rng):
    seen = np.concatenate(list(iter_epoch_batches(toy_video, 5, rng, 16)))
    assert len(seen) == 2 * 3 * 2 * 2
    assert len({tuple(r) for r in seen}) == len(seen)


# -- manifest ----------------------------------------------------------------

def _write_sequence(tmp_path, video, bit_depth=8):
    spec = raw_spec_for(video, bit_depth)
    views = []
    for k, (tex, depth) in enumerate(video_to_raw(video, bit_depth)):
        views.append(ViewFiles(tmp_path / f"v{k}.yuv", tmp_path / f"v{k}.d16"))
        write_atomic(views[-1].texture, tex)
        write_atomic(views[-1].depth, depth)
    m = SequenceManifest(spec, views, "toy")
    m.dump(tmp_path / "seq.json")
    return tmp_path / "seq.json"


@pytest.mark.parametrize("bit_depth", [8, 10])
def test_manifest_load_sequence_round_trip(tmp_path, bit_depth):
    video = smooth_rgbd(2, 2, 16, 16)
    path = _write_sequence(tmp_path, video, bit_depth)
    m = SequenceManifest.load(path)
    assert m.spec.view_count == 2 and m.spec.bit_depth == bit_depth
    back = load_sequence(m)
    assert back.shape == video.shape
    assert back.depth_range == pytest.approx(video.depth_range, abs=1.0)
    # re-encoding the loaded sequence reproduces the files within one code value
    for view, (tex, depth) in zip(m.views, video_to_raw(back, bit_depth)):
        dt = np.uint8 if bit_depth == 8 else np.dtype("<u2")
        a = np.frombuffer(view.texture.read_bytes(), dt).astype(int)
        assert np.abs(np.frombuffer(tex, dt).astype(int) - a).max() <= 1
        d0 = np.frombuffer(view.depth.read_bytes(), "<u2").astype(int)
        assert np.abs(np.frombuffer(depth, "<u2").astype(int) - d0).max() <= 1


def test_manifest_view_geometry_mismatch(tmp_path):
    doc = {"width": 16, "height": 16, "frame_count": 2,
           "views": [{"texture": "a", "depth": "b"},
                     {"texture": "c", "depth": "d", "width": 32}]}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(SequenceSpecError, match="view 1 geometry"):
        SequenceManifest.load(tmp_path / "m.json")


def test_write_atomic_leaves_no_temp(tmp_path):
    write_atomic(tmp_path / "x.bin", b"abc")
    assert [p.name for p in tmp_path.iterdir()] == ["x.bin"]
