"""
Tests for synthetic datasets, containers, the toy autoencoder, pose maps,
hand crops and the colour tracker.
"""
import json
import math

import numpy as np
import pytest
import torch

from config_manager import AudioConfig, SyntheticClipSpec, SyntheticHandSpec
from errors import ConfigError, SchemaVersionError, ShapeError
from metrics import head_sequence, hmv
from pose_calibration import CANONICAL_JOINTS, Joint, Skeleton2D, face_joint, hand_joint
from synthetic_data import (
    FINGER_SLOTS_DEG,
    ToyAutoencoder,
    crop_hands,
    hand_poses,
    images_to_tensor,
    load_clips,
    load_hand_images,
    make_synthetic_clip,
    make_synthetic_clips,
    make_synthetic_hands,
    read_container,
    render_hands,
    render_pose_map,
    tensor_to_images,
    track_colour_centroids,
    write_container,
)


def test_container_bytes_are_deterministic(tmp_path):
    arrays = {"b": np.arange(6, dtype=np.int16).reshape(2, 3), "a": np.ones(4, dtype=np.float32)}
    first = write_container(tmp_path / "one", "demo", {"k": 1}, 7, arrays)
    second = write_container(tmp_path / "two", "demo", {"k": 1}, 7, arrays)
    for name in ("header.json", "a.npy", "b.npy"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    header, loaded = read_container(first, "demo")
    assert header.seed == 7 and header.spec == {"k": 1}
    assert np.array_equal(loaded["b"], arrays["b"])


def test_container_errors(tmp_path):
    with pytest.raises(ConfigError, match="header.json"):
        read_container(tmp_path / "nothing")
    path = write_container(tmp_path / "d", "hands", {}, 0, {"images": np.zeros((2, 4, 4, 3), np.uint8)})
    with pytest.raises(SchemaVersionError, match="expected 'clips'"):
        read_container(path, "clips")

    np.save(path / "images.npy", np.zeros((3, 4, 4, 3), np.uint8))
    with pytest.raises(ShapeError):
        read_container(path)

    header = json.loads((path / "header.json").read_text())
    header["schema_version"] = 2
    (path / "header.json").write_text(json.dumps(header))
    with pytest.raises(SchemaVersionError):
        read_container(path)


def test_hands_depend_only_on_seed_split_and_index():
    spec = SyntheticHandSpec(image_size=32)
    three = render_hands(spec, 3)
    two = render_hands(spec, 2)
    assert three.shape == (3, 32, 32, 3) and three.dtype == np.uint8
    assert np.array_equal(three[:2], two)
    assert not np.array_equal(three[0], three[1])
    assert not np.array_equal(render_hands(spec, 1, "heldout")[0], three[0])
    assert not np.array_equal(render_hands(spec.model_copy(update={"seed": 1}), 1)[0], three[0])
    with pytest.raises(ValueError):
        render_hands(spec, 0)


def test_zero_articulation_fixes_finger_angles():
    spec = SyntheticHandSpec(image_size=32, articulation_range=0.0, finger_count_range=[5, 5])
    poses = hand_poses(spec, 6)
    expected = [math.radians(d) for d in FINGER_SLOTS_DEG for _ in range(2)]
    for pose in poses:
        flat = [a for pair in pose.finger_angles() for a in pair]
        assert flat == pytest.approx(expected)
    assert len({pose.palm_ry for pose in poses}) > 1

    loose = hand_poses(spec.model_copy(update={"articulation_range": 0.6}), 6)
    assert len({tuple(p.finger_angles()) for p in loose}) == 6


def test_hand_dataset_loads_in_unit_range(tmp_path):
    spec = SyntheticHandSpec(image_size=16)
    make_synthetic_hands(spec, 5, tmp_path / "hands")
    images = load_hand_images(tmp_path / "hands")
    assert images.shape == (5, 3, 16, 16)
    assert float(images.min()) >= -1.0 and float(images.max()) <= 1.0


def test_image_tensor_conversion_is_exact_on_uint8():
    images = np.random.default_rng(0).integers(0, 256, size=(2, 5, 5, 3), dtype=np.uint8)
    x = images_to_tensor(images)
    assert x.shape == (2, 3, 5, 5)
    assert np.array_equal(tensor_to_images(x), images)


def test_clip_contents():
    clip = make_synthetic_clip(seed=1, frames=6)
    assert clip.frames.shape == (6, 3, 64, 64)
    assert len(clip.skeletons) == 6
    assert set(clip.skeletons[0].joints) == set(CANONICAL_JOINTS)
    assert clip.audio.shape == (1, 24, 50, 384)
    assert clip.keypoints().shape == (6, len(CANONICAL_JOINTS), 3)


def test_clip_is_seeded():
    a = make_synthetic_clip(seed=3, frames=4)
    b = make_synthetic_clip(seed=3, frames=4)
    assert torch.equal(a.frames, b.frames) and torch.equal(a.audio, b.audio)
    assert not torch.equal(a.frames, make_synthetic_clip(seed=4, frames=4).frames)


def test_head_follows_rhythm_envelope():
    spec = SyntheticClipSpec(fps=24.0)
    still = make_synthetic_clip(seed=2, frames=24, spec=spec, rhythm_hz=2.0, rhythm_amplitude=0.0)
    assert np.ptp(still.head_track, axis=0).max() == pytest.approx(0.0, abs=1e-12)

    moving = make_synthetic_clip(seed=2, frames=24, spec=spec, rhythm_hz=2.0, rhythm_amplitude=1.0)
    envelope = np.cos(2 * np.pi * 2.0 * np.arange(24) / 24.0)
    assert np.corrcoef(moving.head_track[:, 1], envelope)[0, 1] > 0.999
    assert np.ptp(moving.head_track[:, 1]) == pytest.approx(2 * spec.head_motion_px, rel=1e-6)


def test_doubling_rhythm_amplitude_raises_head_motion_variance(tmp_path):
    audio_cfg = AudioConfig(window=4, tokens=6, dim=8, proj_dim=4)
    auto = ToyAutoencoder(frame_size=32, latent_size=8)
    scores = {}
    for amplitude in (0.4, 0.8):
        spec = SyntheticClipSpec(frame_size=32, frames=24, rhythm_amplitude_range=[amplitude, amplitude])
        make_synthetic_clips(spec, audio_cfg, 1, tmp_path / str(amplitude), autoencoder=auto)
        clips = load_clips(tmp_path / str(amplitude))
        assert clips.rhythm_amplitude[0] == pytest.approx(amplitude)
        scores[amplitude] = hmv(head_sequence(clips.skeletons(0)))
    assert scores[0.8] > scores[0.4] > 0.0


def test_clip_dataset_round_trip(tmp_path):
    spec = SyntheticClipSpec(frame_size=32, frames=4)
    audio_cfg = AudioConfig(window=4, tokens=6, dim=8, proj_dim=4)
    auto = ToyAutoencoder(frame_size=32, latent_size=8)
    make_synthetic_clips(spec, audio_cfg, 2, tmp_path / "clips", autoencoder=auto)
    clips = load_clips(tmp_path / "clips")
    assert len(clips) == 2
    assert clips.frames.shape == (2, 4, 3, 32, 32)
    assert clips.latents.shape == (2, 4, 4, 8, 8)
    assert clips.audio.shape == (2, 4, 6, 8)
    assert len(clips.skeletons(1)) == 4
    torch.testing.assert_close(clips.latents[0], auto.encode(clips.frames[0]), atol=1e-2, rtol=0)


def test_toy_autoencoder_round_trip_on_block_images():
    auto = ToyAutoencoder(frame_size=16, latent_size=4, latent_channels=4)
    blocks = torch.rand(2, 3, 4, 4) * 2 - 1
    frames = blocks.repeat_interleave(4, dim=-1).repeat_interleave(4, dim=-2)
    z = auto.encode(frames)
    assert z.shape == (2, 4, 4, 4)
    assert torch.allclose(auto.decode(z), frames, atol=1e-5)


def test_toy_autoencoder_errors():
    with pytest.raises(ConfigError):
        ToyAutoencoder(latent_channels=2)
    with pytest.raises(ConfigError):
        ToyAutoencoder(frame_size=64, latent_size=15)
    auto = ToyAutoencoder(frame_size=16, latent_size=4)
    with pytest.raises(ShapeError):
        auto.encode(torch.zeros(1, 3, 8, 8))
    with pytest.raises(ShapeError):
        auto.decode(torch.zeros(1, 3, 4, 4))


def test_pose_map_leaves_out_the_face():
    face_only = Skeleton2D({"nose": Joint(10.0, 10.0), face_joint(0): Joint(12.0, 10.0), "neck": Joint(10.0, 20.0)})
    blank = render_pose_map(face_only, 32)
    assert blank.shape == (3, 32, 32)
    assert bool((blank == -1.0).all())

    clip = make_synthetic_clip(seed=0, frames=1)
    drawn = render_pose_map(clip.skeletons[0], 64)
    assert float(drawn.max()) == 1.0


def test_pose_map_skips_low_confidence_joints():
    skel = Skeleton2D({"neck": Joint(5.0, 5.0), "left_shoulder": Joint(20.0, 5.0, confidence=0.1)})
    assert bool((render_pose_map(skel, 32) == -1.0).all())


def test_crop_hands_pads_outside_the_frame():
    frame = torch.ones(3, 64, 64)
    skel = Skeleton2D({hand_joint("left", 0): Joint(0.0, 0.0), hand_joint("right", 0): Joint(32.0, 32.0)})
    left, right = crop_hands(frame, skel, out_size=16, crop_px=16)
    assert left.shape == right.shape == (3, 16, 16)
    assert float(left.min()) == -1.0 and float(left.max()) == 1.0
    assert bool((right == 1.0).all())


def test_crop_hands_falls_back_to_wrist():
    frame = torch.full((3, 32, 32), -1.0)
    frame[:, 8:16, 20:28] = 1.0
    skel = Skeleton2D({"left_wrist": Joint(24.0, 12.0), "right_wrist": Joint(4.0, 28.0)})
    left, right = crop_hands(frame, skel, out_size=8, crop_px=8)
    assert bool((left == 1.0).all())
    assert float(right.max()) == -1.0


def test_tracker_finds_scripted_parts():
    clip = make_synthetic_clip(seed=4, frames=6, spec=SyntheticClipSpec(texture_noise=0.0))
    motion = track_colour_centroids(clip.frames)
    assert motion.head.shape == (6, 2)
    np.testing.assert_allclose(motion.head, clip.head_track, atol=1.0)
    np.testing.assert_allclose(motion.left_hand, clip.hand_track[:, 0], atol=1.0)
    np.testing.assert_allclose(motion.right_hand, clip.hand_track[:, 1], atol=1.0)


def test_tracker_reuses_last_position_when_part_vanishes():
    clip = make_synthetic_clip(seed=4, frames=3, spec=SyntheticClipSpec(texture_noise=0.0))
    frames = clip.frames.clone()
    frames[1] = -1.0
    motion = track_colour_centroids(frames)
    np.testing.assert_allclose(motion.head[1], motion.head[0])
