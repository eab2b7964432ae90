import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from sparsepatch.errors import ParseError, ValidationError
from sparsepatch.gopcodec import (
    GopClip,
    PatchGrid,
    decode_gop,
    encode_gop,
    flatten_index,
    patchify,
    read_gop,
    sad_nearest,
    unflatten_index,
    unpatchify,
    write_gop,
)
from sparsepatch.videoio import RawClip, SynthSpec, synth_clip


def _noise_clip(t=3, h=32, w=48, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return RawClip(pixels=rng.integers(0, 256, size=(t, h, w, 3), dtype=np.uint8))


def test_flatten_index_known():
    assert flatten_index(0, 0, 4) == 0
    assert flatten_index(1, 2, 4) == 6
    assert unflatten_index(6, 4) == (1, 2)
    with pytest.raises(ValidationError):
        flatten_index(0, 4, 4)
    with pytest.raises(ValidationError):
        unflatten_index(-1, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 30), st.integers(1, 40))
def test_flatten_roundtrip(v, grid_w):
    row, col = unflatten_index(v, grid_w)
    assert flatten_index(row, col, grid_w) == v


def test_patchify_layout():
    # pixel (y, x, c) of patch (pr, pc) must land at
    # row grid_w*pr+pc, column (y*16 + x)*3 + c
    h, w = 32, 48
    frame = (np.arange(h * w * 3) % 251).reshape(h, w, 3).astype(np.uint8)
    grid = patchify(frame)
    assert (grid.grid_h, grid.grid_w) == (2, 3)
    for pr, pc, y, x, c in [(0, 0, 0, 0, 0), (0, 1, 3, 7, 2), (1, 2, 15, 15, 1),
                            (1, 0, 8, 2, 0)]:
        v = grid.grid_w * pr + pc
        col = (y * 16 + x) * 3 + c
        assert grid.patches[v, col] == frame[pr * 16 + y, pc * 16 + x, c]


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([16, 32]), st.sampled_from([16, 48]), st.integers(0, 2**31 - 1))
def test_patchify_unpatchify_roundtrip(h, w, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    frame = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    assert np.array_equal(unpatchify(patchify(frame)), frame)


def test_unpatchify_range_check():
    grid = patchify(np.zeros((16, 16, 3), dtype=np.uint8))
    grid.patches[0, 0] = -3
    with pytest.raises(ValidationError):
        unpatchify(grid)


def test_sad_nearest_matches_cityblock_oracle():
    rng = np.random.Generator(np.random.PCG64(5))
    q = rng.integers(0, 256, size=(40, 768), dtype=np.uint8)
    k = rng.integers(0, 256, size=(17, 768), dtype=np.uint8)
    idx, best = sad_nearest(q, k)
    d = cdist(q.astype(np.float64), k.astype(np.float64), "cityblock")
    assert np.array_equal(idx, d.argmin(axis=1))
    assert np.array_equal(best.astype(np.float64), d.min(axis=1))


def test_sad_nearest_tie_breaks_to_first():
    k = np.zeros((4, 8), dtype=np.uint8)
    k[1] = 1  # keys 0, 2, 3 are identical
    q = np.zeros((1, 8), dtype=np.uint8)
    idx, best = sad_nearest(q, k)
    assert idx[0] == 0
    assert best[0] == 0


def test_encode_decode_bit_exact_noise():
    clip = _noise_clip()
    back = decode_gop(encode_gop(clip))
    assert np.array_equal(back.pixels, clip.pixels)


def test_encode_decode_bit_exact_synth():
    spec = SynthSpec(identity_count=3, clips_per_identity=1, height=64,
                     width=128, frames=5, background="distractor",
                     motion_amplitude=6.0, seed=2)
    clip = synth_clip(spec, identity=1, clip_seed=0)
    gop = encode_gop(clip)
    back = decode_gop(gop)
    assert np.array_equal(back.pixels, clip.pixels)
    assert gop.frames == clip.frames


def test_encode_motion_against_oracle():
    clip = _noise_clip(t=4, h=48, w=64, seed=9)
    gop = encode_gop(clip)
    i_pix = patchify(clip.pixels[0]).patches.astype(np.float64)
    for t in range(1, clip.frames):
        p_pix = patchify(clip.pixels[t]).patches.astype(np.float64)
        d = cdist(p_pix, i_pix, "cityblock")
        assert np.array_equal(gop.motion[t - 1], d.argmin(axis=1))


def test_static_clip_has_identity_motion_and_zero_residual():
    frame = np.arange(32 * 32 * 3).reshape(32, 32, 3)
    frame = (frame % 211).astype(np.uint8)
    clip = RawClip(pixels=np.stack([frame, frame, frame]))
    gop = encode_gop(clip)
    # all patches distinct here, so each matches itself exactly
    assert np.array_equal(gop.motion, np.tile(np.arange(4), (2, 1)))
    assert not gop.residual.any()


def test_duplicate_patches_pick_smallest_index():
    # frame of identical patches: every P patch matches I patch 0
    frame = np.full((32, 32, 3), 77, dtype=np.uint8)
    clip = RawClip(pixels=np.stack([frame, frame]))
    gop = encode_gop(clip)
    assert np.array_equal(gop.motion[0], np.zeros(4, dtype=np.int32))
    assert not gop.residual.any()


def test_single_frame_clip():
    clip = _noise_clip(t=1)
    gop = encode_gop(clip)
    assert gop.motion.shape == (0, 6)
    back = decode_gop(gop)
    assert np.array_equal(back.pixels, clip.pixels)


def test_gop_file_roundtrip(tmp_path):
    clip = _noise_clip(t=3, seed=21)
    gop = encode_gop(clip)
    path = tmp_path / "clip.gop1"
    write_gop(gop, path)
    back = read_gop(path)
    assert np.array_equal(back.i_frame.patches, gop.i_frame.patches)
    assert np.array_equal(back.motion, gop.motion)
    assert np.array_equal(back.residual, gop.residual)
    assert np.array_equal(decode_gop(back).pixels, clip.pixels)


def test_gop_parse_errors(tmp_path):
    clip = _noise_clip(t=2, h=16, w=32, seed=3)
    good = tmp_path / "good.gop1"
    write_gop(encode_gop(clip), good)
    blob = good.read_bytes()
    bad = tmp_path / "bad.gop1"

    bad.write_bytes(b"XXXXXX" + blob[6:])
    with pytest.raises(ParseError, match="offset 0"):
        read_gop(bad)

    bad.write_bytes(blob[:14])
    with pytest.raises(ParseError, match="truncated"):
        read_gop(bad)

    bad.write_bytes(blob[:20])
    with pytest.raises(ParseError, match="truncated I-frame"):
        read_gop(bad)

    bad.write_bytes(blob[:-4])
    with pytest.raises(ParseError, match="truncated residual"):
        read_gop(bad)

    bad.write_bytes(blob + b"zz")
    with pytest.raises(ParseError, match="trailing bytes"):
        read_gop(bad)

    # corrupt a motion entry to point outside the grid
    hacked = bytearray(blob)
    motion_off = 6 + 12 + 2 * 768
    hacked[motion_off:motion_off + 4] = (999).to_bytes(4, "little")
    bad.write_bytes(bytes(hacked))
    with pytest.raises(ParseError, match="motion index"):
        read_gop(bad)


def test_gopclip_validation():
    grid = patchify(np.zeros((16, 32, 3), dtype=np.uint8))
    motion = np.zeros((1, 2), dtype=np.int32)
    residual = np.zeros((1, 2, 768), dtype=np.int16)
    GopClip(i_frame=grid, motion=motion, residual=residual, height=16, width=32)
    with pytest.raises(ValidationError):
        GopClip(i_frame=grid, motion=motion + 9, residual=residual,
                height=16, width=32)
    with pytest.raises(ValidationError):
        GopClip(i_frame=grid, motion=motion, residual=residual + 300,
                height=16, width=32)
    with pytest.raises(ValidationError):
        GopClip(i_frame=grid, motion=motion, residual=residual,
                height=32, width=32)
