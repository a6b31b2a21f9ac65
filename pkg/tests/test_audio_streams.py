"""
Tests for audio pooling, rhythm projection, region masks and masked cross-attention.
"""
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from audio_streams import (
    MaskedCrossAttention,
    RegionMask,
    RhythmProjector,
    frame_aligned_streams,
    hand_mask_from_keypoints,
    head_mask_from_keypoints,
    masked_cross_attention,
    pool_windows,
    project_rhythm,
    region_mask_from_points,
    rhythm_envelope,
    synth_audio_features,
    validate_audio_features,
)
from config_manager import AudioConfig
from enums import Region
from errors import ShapeError
from pose_calibration import Joint, Skeleton2D


def dense_attention(attn: MaskedCrossAttention, hidden: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
    """Independent single-head softmax attention from the layer's weights."""
    q = hidden @ attn.to_q.weight.T
    k = context @ attn.to_k.weight.T
    v = context @ attn.to_v.weight.T
    scores = q @ k.transpose(1, 2) / math.sqrt(q.shape[-1])
    weights = torch.exp(scores - scores.max(dim=-1, keepdim=True).values)
    weights = weights / weights.sum(dim=-1, keepdim=True)
    return (weights @ v) @ attn.to_out.weight.T + attn.to_out.bias


def test_pool_windows_mean():
    w = torch.arange(24, dtype=torch.float32).reshape(1, 2, 3, 4)
    pooled = pool_windows(w)
    assert pooled.shape == (1, 3, 4)
    assert torch.equal(pooled, (w[:, 0] + w[:, 1]) / 2)
    with pytest.raises(ShapeError):
        pool_windows(torch.zeros(2, 3, 4))


def test_validate_audio_features():
    cfg = AudioConfig(window=2, tokens=3, dim=8, proj_dim=4)
    validate_audio_features(torch.zeros(1, 2, 3, 8), cfg)
    with pytest.raises(ShapeError):
        validate_audio_features(torch.zeros(1, 2, 3, 7), cfg)
    with pytest.raises(ValueError, match="non-finite"):
        validate_audio_features(torch.full((1, 2, 3, 8), float("nan")), cfg)


def test_project_rhythm_linear_and_zero():
    proj = RhythmProjector(8, 4, linear=True, bias=False)
    f = torch.randn(2, 5, 8)
    assert torch.allclose(project_rhythm(f, proj), f @ proj.net.weight.T)
    assert torch.equal(project_rhythm(torch.zeros(1, 5, 8), proj), torch.zeros(1, 5, 4))
    with pytest.raises(ShapeError):
        project_rhythm(torch.zeros(1, 5, 7), proj)


def test_mlp_projector_shape():
    proj = RhythmProjector(8, 4)
    assert project_rhythm(torch.randn(3, 6, 8), proj).shape == (3, 6, 4)


@pytest.mark.parametrize("mask_kind", ["head", "hand", "none"])
def test_masked_attention_locality_against_dense_oracle(mask_kind):
    gen = torch.Generator().manual_seed({"head": 1, "hand": 2, "none": 3}[mask_kind])
    attn = MaskedCrossAttention(6, 5)
    for _ in range(30):
        hidden = torch.randn(2, 9, 6, generator=gen)
        context = torch.randn(2, 4, 5, generator=gen)
        if mask_kind == "none":
            mask = None
            keep = torch.ones(2, 9, 1, dtype=torch.bool)
        else:
            bits = (torch.rand(2, 9, 1, generator=gen) > 0.5).float()
            mask = RegionMask(bits, Region.HEAD if mask_kind == "head" else Region.HAND)
            keep = bits.bool()
        out = masked_cross_attention(hidden, context, mask, attn)
        oracle = hidden + dense_attention(attn, hidden, context)
        rows_off = ~keep.expand_as(hidden)
        assert torch.equal(out[rows_off], hidden[rows_off])
        rows_on = keep.expand_as(hidden)
        assert torch.allclose(out[rows_on], oracle[rows_on], atol=1e-5)


def test_all_zero_mask_is_identity():
    attn = MaskedCrossAttention(4, 3)
    hidden = torch.randn(1, 5, 4)
    out = attn(hidden, torch.randn(1, 2, 3), torch.zeros(1, 5, 1))
    assert torch.equal(out, hidden)


def test_single_context_token_gets_full_weight():
    attn = MaskedCrossAttention(4, 3)
    hidden = torch.randn(1, 5, 4)
    context = torch.randn(1, 1, 3)
    weights = attn.attention_weights(hidden, context)
    assert torch.allclose(weights, torch.ones_like(weights))
    out = attn(hidden, context)
    expected = hidden + attn.to_out(attn.to_v(context)).expand(1, 5, 4)
    assert torch.allclose(out, expected, atol=1e-6)


@given(n=st.integers(1, 8), m=st.integers(1, 6), heads=st.sampled_from([1, 2]))
@settings(max_examples=20, deadline=None)
def test_attention_rows_are_convex(n, m, heads):
    attn = MaskedCrossAttention(4, 3, heads=heads)
    weights = attn.attention_weights(torch.randn(2, n, 4), torch.randn(2, m, 3))
    assert bool((weights >= 0).all())
    assert torch.allclose(weights.sum(dim=-1), torch.ones(2, heads, n), atol=1e-6)


def test_masked_attention_errors():
    attn = MaskedCrossAttention(4, 3)
    hidden = torch.randn(1, 5, 4)
    with pytest.raises(ShapeError, match="zero length"):
        attn(hidden, torch.zeros(1, 0, 3))
    with pytest.raises(ShapeError):
        attn(hidden, torch.randn(1, 2, 3), torch.ones(1, 4, 1))
    with pytest.raises(ShapeError):
        attn(hidden, torch.randn(2, 2, 3))
    with pytest.raises(ValueError):
        RegionMask(torch.full((1, 5, 1), 0.5))


def test_region_mask_full_frame_sets_every_cell():
    points = np.array([[0.0, 0.0], [63.0, 63.0]])
    mask = region_mask_from_points(points, (8, 8), (64, 64), 0.0)
    assert mask.shape == (64,)
    assert bool((mask == 1).all())


def test_region_mask_single_point_and_empty():
    mask = region_mask_from_points(np.array([[12.0, 20.0]]), (8, 8), (64, 64), 0.0).reshape(8, 8)
    assert mask.sum() == 1
    assert mask[20 // 8, 12 // 8] == 1
    empty = region_mask_from_points(np.zeros((0, 2)), (8, 8), (64, 64), 0.25)
    assert empty.sum() == 0


def test_region_mask_clamps_to_frame():
    mask = region_mask_from_points(np.array([[-50.0, -50.0], [-40.0, -45.0]]), (4, 4), (64, 64), 0.0).reshape(4, 4)
    assert mask[0, 0] == 1 and mask.sum() == 1


def test_region_mask_shape_error():
    with pytest.raises(ShapeError):
        region_mask_from_points(np.array([[1.0, 1.0]]), (5, 5), (64, 64), 0.0)


def test_head_mask_from_keypoints_and_missing_face():
    skel = Skeleton2D({"nose": Joint(40.0, 10.0), "neck": Joint(32.0, 28.0)})
    mask, warning = head_mask_from_keypoints(skel, (8, 8), (64, 64), dilation=0.0)
    assert not warning
    assert mask.region is Region.HEAD
    grid = mask.data.reshape(8, 8)
    # The neck at (32, 28) does not stretch the box.
    assert grid[1, 5] == 1 and grid.sum() == 1
    assert grid[3, 4] == 0

    empty, warning = head_mask_from_keypoints(Skeleton2D({"neck": Joint(1.0, 1.0)}), (8, 8), (64, 64))
    assert warning
    assert float(empty.data.sum()) == 0.0


def test_hand_mask_is_union_of_hands():
    skel = Skeleton2D({
        "left_wrist": Joint(56.0, 56.0), "left_hand_0": Joint(57.0, 57.0),
        "right_wrist": Joint(4.0, 56.0), "right_hand_0": Joint(5.0, 57.0),
    })
    mask, warning = hand_mask_from_keypoints(skel, (8, 8), (64, 64), dilation=0.0)
    grid = mask.data.reshape(8, 8)
    assert not warning
    assert grid[7, 7] == 1 and grid[7, 0] == 1
    assert grid.sum() == 2


def test_rhythm_spectrum_peaks_at_rhythm_frequency():
    rate, tokens, hz = 50.0, 200, 5.0
    w = synth_audio_features(seed=3, rhythm_hz=hz, length_tokens=tokens, window=6, dim=16, noise=0.1, token_rate_hz=rate)
    assert w.shape == (1, 6, tokens, 16)
    pooled = pool_windows(w)[0].numpy()
    # Power summed over feature dims; the shared envelope dominates every dim.
    spectrum = (np.abs(np.fft.rfft(pooled - pooled.mean(axis=0), axis=0)) ** 2).sum(axis=1)
    freqs = np.fft.rfftfreq(tokens, d=1.0 / rate)
    assert freqs[int(np.argmax(spectrum))] == pytest.approx(hz)


def test_synth_audio_is_seeded():
    a = synth_audio_features(1, 2.0, 10, window=2, dim=4)
    b = synth_audio_features(1, 2.0, 10, window=2, dim=4)
    c = synth_audio_features(2, 2.0, 10, window=2, dim=4)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_rhythm_envelope_values():
    env = rhythm_envelope(1.0, 4, token_rate_hz=4.0, amplitude=2.0)
    assert env == pytest.approx([2.0, 0.0, -2.0, 0.0], abs=1e-12)


def test_frame_aligned_streams_centre_each_frame():
    tokens = 10
    w = torch.arange(tokens, dtype=torch.float32).reshape(1, 1, tokens, 1).repeat(1, 3, 1, 1)
    w[:, 1] += 100.0
    lip, rhythm = frame_aligned_streams(w, frames=4, fps=5.0, token_rate_hz=10.0)
    assert lip.shape == (1, 4, tokens, 1) and rhythm.shape == (1, 4, tokens, 1)
    # Frame f sits at token 2f, rolled to index T // 2.
    for f in range(4):
        centre = (2 * f) % tokens
        assert float(rhythm[0, f, tokens // 2, 0]) == pytest.approx(centre + 100.0 / 3)
        assert float(lip[0, f, tokens // 2, 0]) == centre + (100.0 if f % 3 == 1 else 0.0)
