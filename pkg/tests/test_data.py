import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asd.data import (
    CANONICAL_FACE,
    FaceObservation,
    SyntheticConfig,
    Track,
    aggregate_audio_label,
    build_sequences,
    dataset_digest,
    generate_scene,
    generate_synthetic,
    read_dataset,
    render_face,
    resize_image,
    split_scenes,
    stack_indices,
    tracks_from_scenes,
    window_starts,
    write_dataset,
)

from . import oracles


@given(st.lists(st.integers(0, 1), max_size=30))
def test_audio_label_is_logical_or(labels):
    assert aggregate_audio_label(labels) == oracles.logical_or(labels)


@pytest.mark.parametrize("labels, expected", [([], 0), ([0, 0, 0], 0), ([0, 1, 0], 1), ([1, 1], 1)])
def test_audio_label_examples(labels, expected):
    assert aggregate_audio_label(labels) == expected


def test_audio_label_rejects_non_binary():
    with pytest.raises(ValueError):
        aggregate_audio_label([0, 2])


def test_face_observation_validation():
    with pytest.raises(ValueError):
        FaceObservation("t", 0, np.zeros((0, 0)), 1, 0)
    with pytest.raises(ValueError):
        FaceObservation("t", 0, np.zeros((2, 2)), 0, 0)


# windowing -------------------------------------------------------------------------------


def _track(n, R=4, start=0):
    rng = np.random.default_rng(n)
    return Track(
        track_id="t",
        scene_id="s",
        frame_indices=np.arange(start, start + n),
        faces=rng.random((n, R, R)).astype(np.float32),
        audio=rng.normal(size=(n, 13, 48)).astype(np.float32),
        labels_video=rng.integers(0, 2, n),
        labels_audio=np.ones(n, dtype=np.int64),
        face_count=np.full(n, 2),
        face_area=np.full(n, 64),
    )


def test_stack_indices_replicate_first_frame():
    np.testing.assert_array_equal(stack_indices(4), [[0, 0, 0], [0, 0, 1], [0, 1, 2], [1, 2, 3]])


@given(st.integers(1, 120), st.integers(3, 40), st.booleans())
@settings(max_examples=200)
def test_windows_cover_track(n, length, eval_mode):
    starts = window_starts(n, length, eval_mode)
    covered = set()
    for s in starts:
        covered.update(range(s, min(n, s + length)))
        assert s + length <= max(n, length)
    assert covered == set(range(n))
    assert starts == sorted(set(starts))


@given(st.integers(3, 90), st.integers(3, 30))
@settings(max_examples=100, deadline=None)
def test_eval_windows_own_every_frame_exactly_once(n, length):
    samples = build_sequences(_track(n), length, eval_mode=True)
    owned = np.concatenate([s.frame_indices[s.owned] for s in samples])
    assert sorted(owned.tolist()) == list(range(n))
    for s in samples:
        assert not np.any(s.owned & ~s.mask)


def test_short_track_is_left_padded():
    tr = _track(5)
    (s,) = build_sequences(tr, 8)
    np.testing.assert_array_equal(s.mask, [False] * 3 + [True] * 5)
    np.testing.assert_array_equal(s.frame_indices, [-1, -1, -1, 0, 1, 2, 3, 4])
    assert np.all(s.video[:3] == 0)
    np.testing.assert_array_equal(s.labels_video[3:], tr.labels_video)


def test_sequence_video_is_frame_stack():
    tr = _track(10)
    (s,) = build_sequences(tr, 10)
    np.testing.assert_array_equal(s.video[5], tr.faces[[3, 4, 5]])
    np.testing.assert_array_equal(s.video[0], tr.faces[[0, 0, 0]])


def test_training_windows_overlap_by_half():
    assert window_starts(60, 28, eval_mode=False) == [0, 14, 28, 32]
    assert window_starts(60, 28, eval_mode=True) == [0, 28, 32]


@pytest.mark.parametrize("n", [1, 2])
def test_track_too_short_for_stacks(n):
    with pytest.raises(ValueError, match="at least 3"):
        build_sequences(_track(n), 8)


def test_non_contiguous_track_rejected():
    tr = _track(6)
    tr.frame_indices = np.array([0, 1, 2, 4, 5, 6])
    with pytest.raises(ValueError, match="contiguous"):
        build_sequences(tr, 8)


# synthetic generator -------------------------------------------------------------------


SMALL = SyntheticConfig(num_scenes=6, frames_per_scene=10, seed=3)


def test_generator_is_deterministic():
    assert dataset_digest(generate_synthetic(SMALL)) == dataset_digest(generate_synthetic(SMALL))
    other = SyntheticConfig(num_scenes=6, frames_per_scene=10, seed=4)
    assert dataset_digest(generate_synthetic(SMALL)) != dataset_digest(generate_synthetic(other))


def test_scene_is_independent_of_scene_count():
    a = generate_scene(SMALL, 2)
    b = generate_synthetic(SyntheticConfig(num_scenes=3, frames_per_scene=10, seed=3))[2]
    assert dataset_digest([a]) == dataset_digest([b])


def test_generated_labels_are_consistent():
    for sc in generate_synthetic(SMALL):
        n = sc.frames[0].face_count
        assert 1 <= n <= 5
        assert sc.audio.shape == (10, 13, 48)
        for fr in sc.frames:
            assert fr.face_count == n
            assert fr.audio_label == oracles.logical_or([f.video_label for f in fr.faces])
            for f in fr.faces:
                assert f.face_pixels.shape[0] ** 2 == f.face_area
                assert f.face_pixels.min() >= 0 and f.face_pixels.max() <= 1


def test_silent_frames_have_no_speech_signature():
    cfg = SyntheticConfig(num_scenes=30, frames_per_scene=28, seed=1, audio_noise_sigma=0.0)
    for sc in generate_synthetic(cfg):
        for fr in sc.frames:
            if fr.audio_label == 0:
                assert np.all(sc.audio[fr.frame_index] == 0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(face_count_distribution=(0.5, 0.5)),
        dict(face_count_distribution=(0.5, 0.5, 0.5, 0, 0)),
        dict(face_size_range=(10.0, 5.0)),
        dict(speech_persistence=1.0),
        dict(frames_per_scene=2),
    ],
)
def test_invalid_synthetic_config(kwargs):
    with pytest.raises(ValueError):
        SyntheticConfig(**kwargs)


def test_mouth_visible_only_at_large_sizes():
    tex = np.full((CANONICAL_FACE, CANONICAL_FACE), 0.5)
    zero = lambda s: np.zeros((s, s))  # noqa: E731
    open_big = render_face(tex, 0.9, 32, zero(32))
    shut_big = render_face(tex, 0.1, 32, zero(32))
    open_tiny = render_face(tex, 0.9, 2, zero(2))
    shut_tiny = render_face(tex, 0.1, 2, zero(2))
    assert np.abs(open_big - shut_big).max() > 0.7
    assert np.abs(open_tiny - shut_tiny).max() < 0.3


def test_resize_identity_and_constant():
    img = np.random.default_rng(0).random((6, 6))
    np.testing.assert_array_equal(resize_image(img, 6), img)
    np.testing.assert_allclose(resize_image(np.full((5, 5), 0.3), 17), 0.3, atol=1e-12)


def test_tracks_carry_scene_attributes():
    scenes = generate_synthetic(SMALL)
    tracks = tracks_from_scenes(scenes, 8)
    assert len(tracks) == sum(sc.frames[0].face_count for sc in scenes)
    for tr in tracks:
        assert tr.faces.shape == (10, 8, 8)
        sc = next(s for s in scenes if s.scene_id == tr.scene_id)
        assert np.all(tr.face_count == sc.frames[0].face_count)
        np.testing.assert_array_equal(tr.audio, sc.audio.astype(np.float32))


def test_split_is_deterministic_and_disjoint():
    scenes = generate_synthetic(SMALL)
    a1, b1 = split_scenes(scenes, 0.34, seed=5)
    a2, b2 = split_scenes(scenes, 0.34, seed=5)
    assert [s.scene_id for s in b1] == [s.scene_id for s in b2]
    assert len(b1) == 2 and len(a1) == 4
    assert not {s.scene_id for s in a1} & {s.scene_id for s in b1}


def test_manifest_round_trip(tmp_path):
    scenes = generate_synthetic(SMALL)
    manifest = write_dataset(scenes, tmp_path, meta={"seed": 3})
    back = read_dataset(manifest)
    assert dataset_digest(back) == dataset_digest(scenes)
    assert (tmp_path / "dataset.json").exists()


def test_manifest_missing_entry(tmp_path):
    manifest = write_dataset(generate_synthetic(SMALL)[:1], tmp_path)
    text = manifest.read_text().replace("#face/", "#nothing/", 1)
    manifest.write_text(text)
    with pytest.raises(KeyError, match="not found"):
        read_dataset(manifest)
