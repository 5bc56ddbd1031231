import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from havt_ivd.data_model import (
    GroundTruthBox,
    VehicleState,
    clamp_box,
    read_sample,
    split_dataset,
    split_sizes,
    write_sample,
)
from havt_ivd.errors import ConfigError, ValidationError
from havt_ivd.synthetic_scene import SceneConfig, generate_scene, sample_seed

from conftest import make_sample


def assert_same_sample(a, b):
    assert a.clip.frames.dtype == b.clip.frames.dtype == np.float32
    assert np.array_equal(a.clip.frames, b.clip.frames)
    assert np.array_equal(a.audio.samples, b.audio.samples)
    assert a.clip.frame_rate == b.clip.frame_rate
    assert a.audio.sample_rate == b.audio.sample_rate
    assert a.boxes == b.boxes
    assert a.scene_meta == b.scene_meta


def test_roundtrip_two_boxes(tmp_path):
    s = make_sample(2)
    write_sample(s, tmp_path / "s")
    assert_same_sample(s, read_sample(tmp_path / "s"))


def test_zero_boxes_writes_empty_table(tmp_path):
    s = make_sample(0)
    write_sample(s, tmp_path / "s")
    assert (tmp_path / "s" / "boxes.txt").read_text() == ""
    assert read_sample(tmp_path / "s").boxes == []


def test_box_coordinates_survive_text_storage(tmp_path):
    s = make_sample(0)
    s.boxes = [GroundTruthBox(1 / 3, 10.1, 0.1 + 0.2, 7.0, VehicleState.IDLING)]
    write_sample(s, tmp_path / "s")
    assert read_sample(tmp_path / "s").boxes == s.boxes


def test_generated_corpus_roundtrip_is_exact(tmp_path):
    cfg = SceneConfig(image_size=16, n_frames=2, sample_rate=1000, duration=0.5, motion_speed=(0.5, 1.0), n_vehicles=(0, 3))
    worst = 0.0
    for i in range(1000):
        s = generate_scene(cfg, sample_seed(3, i))
        write_sample(s, tmp_path / f"{i}")
        r = read_sample(tmp_path / f"{i}")
        worst = max(worst, float(np.abs(r.clip.frames - s.clip.frames).max()), float(np.abs(r.audio.samples - s.audio.samples).max()))
        assert r.boxes == s.boxes and r.scene_meta == s.scene_meta
    assert worst == 0.0


@pytest.mark.parametrize(
    "mutate, fragment",
    [
        (lambda s: setattr(s.clip, "frames", s.clip.frames * 2), "[0, 1]"),
        (lambda s: setattr(s.audio, "samples", s.audio.samples * np.nan), "non-finite"),
        (lambda s: s.boxes.append(GroundTruthBox(31.0, 5.0, 10.0, 4.0, VehicleState.MOVING)), "inside"),
        (lambda s: s.scene_meta.update(sample_rate="1"), "reserved"),
    ],
)
def test_invalid_sample_is_rejected_by_name(tmp_path, mutate, fragment):
    s = make_sample(1)
    mutate(s)
    with pytest.raises(ValidationError, match=fragment.replace("[", r"\[").replace("]", r"\]")):
        write_sample(s, tmp_path / "bad")
    assert not (tmp_path / "bad" / "video.f32").exists()


def test_truncated_tensor_file_is_a_validation_error(tmp_path):
    write_sample(make_sample(1), tmp_path / "s")
    f = tmp_path / "s" / "audio.f32"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(ValidationError, match="audio.f32"):
        read_sample(tmp_path / "s")


def test_missing_directory_raises_os_error(tmp_path):
    with pytest.raises(OSError):
        read_sample(tmp_path / "nope")


@given(st.floats(1, 50), st.floats(1, 50), st.floats(0, 1), st.floats(0, 1))
def test_in_bounds_box_survives_clamping(w, h, fx, fy):
    cx = w / 2 + fx * (64 - w)
    cy = h / 2 + fy * (64 - h)
    box = GroundTruthBox(cx, cy, w, h, VehicleState.MOVING)
    assert clamp_box(box, 64, 64) is box


def test_clamping_crops_outside_part():
    box = clamp_box(GroundTruthBox(0.0, 10.0, 10.0, 4.0, VehicleState.IDLING), 64, 64)
    assert box.corners() == (0.0, 8.0, 5.0, 12.0)


def test_split_sizes_exact_arithmetic():
    assert split_sizes(10, (0.8, 0.1, 0.1)) == (8, 1, 1)
    train, val, test = split_dataset(10, (0.8, 0.1, 0.1), 0)
    assert (len(train), len(val), len(test)) == (8, 1, 1)


def test_split_is_deterministic():
    assert split_dataset(list("abcdefghijkl"), (0.5, 0.25, 0.25), 4) == split_dataset(list("abcdefghijkl"), (0.5, 0.25, 0.25), 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 400), st.integers(1, 8), st.integers(0, 8), st.integers(0, 8))
def test_split_partition_properties(seed, n, a, b, c):
    total = a + b + c
    ratios = (a / total, b / total, c / total)
    parts = split_dataset(n, ratios, seed)
    flat = [i for p in parts for i in p]
    assert sorted(flat) == list(range(n))
    assert len(set(flat)) == n
    assert parts == split_dataset(n, ratios, seed)


def test_split_mimic_sizes_disjoint():
    n = 76490 + 8431
    train, val, test = split_dataset(n, (76490 / n, 0.0, 8431 / n), 1)
    assert (len(train), len(val), len(test)) == (76490, 0, 8431)
    assert not set(train) & set(test)
    assert set(train) | set(test) == set(range(n))


@pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.5), (0.8, 0.1, 0.1 + 1e-8), (1.2, -0.1, -0.1), (1.0, 0.0)])
def test_bad_ratios_are_config_errors(ratios):
    with pytest.raises(ConfigError):
        split_dataset(10, ratios, 0)
