import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spmtrack.boxes import BBox
from spmtrack.config import PRESETS, ModelConfig
from spmtrack.model import SPMTrack
from spmtrack.synthetic import SyntheticSceneSpec, generate_synthetic_video
from spmtrack.tracking import (
    CropTransform,
    Tracker,
    TrackerState,
    crop_and_resize,
    crop_side,
    hanning_penalty,
    normalize_image,
    reference_indices,
    select_reference_frames,
)

SMALL = ModelConfig(L=1, d=16, N_h=2, M=4, r=2, N_e=2, ref_size=8, search_size=16)


def test_crop_geometry_example():
    frame = np.zeros((128, 128, 3), dtype=np.float32)
    crop, tf = crop_and_resize(frame, BBox(50, 50, 28, 28), 2.0, 56)
    assert crop_side(BBox(50, 50, 28, 28), 2.0) == 56
    assert crop.shape == (56, 56, 3)
    assert (tf.x0, tf.y0, tf.scale) == (36.0, 36.0, 1.0)
    assert tf.to_frame(28, 28) == (64.0, 64.0)


def test_unit_scale_crop_is_exact_copy():
    frame = np.random.default_rng(0).normal(size=(40, 40, 3)).astype(np.float32)
    crop, _ = crop_and_resize(frame, BBox(10, 10, 10, 10), 2.0, 20)
    np.testing.assert_array_equal(crop, frame[5:25, 5:25])


def test_out_of_frame_area_uses_channel_mean():
    frame = np.random.default_rng(1).uniform(size=(20, 20, 3)).astype(np.float32)
    crop, _ = crop_and_resize(frame, BBox(0, 0, 4, 4), 5.0, 20)
    np.testing.assert_allclose(crop[0, 0], frame.reshape(-1, 3).mean(axis=0), rtol=1e-6)


def test_degenerate_box_gets_minimum_side(caplog):
    assert crop_side(BBox(5, 5, 0, 0), 2.0) == 1.0
    assert "degenerate" in caplog.text


def test_bad_factor_rejected():
    with pytest.raises(ValueError):
        crop_and_resize(np.zeros((8, 8, 3)), BBox(1, 1, 2, 2), 0.0, 4)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 8), st.integers(4, 64),
       st.floats(0, 100), st.floats(0, 100), st.floats(0.5, 30), st.floats(0.5, 30))
def test_crop_transform_round_trip(x0, y0, scale, size, x, y, w, h):
    tf = CropTransform(x0, y0, scale, size)
    b = BBox(x, y, w, h)
    back = tf.box_to_frame(tf.box_to_crop(b))
    np.testing.assert_allclose(back.as_tuple(), b.as_tuple(), rtol=1e-9, atol=1e-9)


def test_normalize_image_constants():
    out = normalize_image(np.full((1, 1, 3), 255, dtype=np.uint8))
    np.testing.assert_allclose(out[0, 0], (1 - np.array([0.485, 0.456, 0.406])) / np.array([0.229, 0.224, 0.225]),
                               rtol=1e-6)


# -- reference schedule -------------------------------------------------------------------------


@pytest.mark.parametrize("t,expected", [
    (1, [0, 0, 0]), (2, [0, 0, 1]), (3, [0, 1, 2]), (4, [0, 1, 2]), (50, [0, 16, 33]), (1000, [0, 333, 666]),
])
def test_reference_schedule_examples(t, expected):
    assert reference_indices(t, 3) == expected


def test_reference_schedule_other_n():
    assert reference_indices(1, 2) == [0, 0]
    assert reference_indices(10, 2) == [0, 5]
    assert reference_indices(40, 4) == [0, 10, 20, 30]


def test_reference_schedule_rejects_template_index():
    with pytest.raises(ValueError):
        reference_indices(0)


@given(st.integers(1, 5000), st.integers(1, 6))
def test_schedule_invariants(t, n):
    idx = reference_indices(t, n)
    assert len(idx) == n and 0 in idx
    assert all(0 <= i <= t - 1 for i in idx)


def test_missing_history_falls_back_to_earlier_frame(caplog):
    state = TrackerState(template=(None, None))
    state.history = {0: None, 10: None, 20: None}
    assert select_reference_frames(50, state, 3) == [0, 10, 20]
    assert "not retained" in caplog.text


# -- Hann window -------------------------------------------------------------------------------


def test_hanning_values():
    w = hanning_penalty(np.ones((5, 5)))
    assert w[2, 2] == 1.0
    assert w[1, 2] == pytest.approx(0.5)
    assert w[0, 0] == 0.0 and w[4, 4] == 0.0
    assert np.unravel_index(np.argmax(hanning_penalty(np.ones((7, 7)))), (7, 7)) == (3, 3)


@pytest.mark.parametrize("n", [1, 2])
def test_hanning_tiny_grid_is_identity(n):
    s = np.full((n, n), 0.3)
    np.testing.assert_array_equal(hanning_penalty(hanning_penalty(s)), s)


# n=3 has window [0, 1, 0], whose only nonzero weight is 1, so start at 4
@given(st.integers(4, 12), st.integers(0, 2**32 - 1))
def test_hanning_preserves_sign_and_is_not_idempotent(n, seed):
    s = np.random.default_rng(seed).uniform(0.1, 1.0, size=(n, n))
    once = hanning_penalty(s)
    assert np.all(once >= 0)
    assert not np.array_equal(hanning_penalty(once), once)


def test_hanning_rejects_non_square():
    with pytest.raises(ValueError):
        hanning_penalty(np.ones((3, 4)))


# -- tracker -------------------------------------------------------------------------------------


def _video(length=6):
    spec = SyntheticSceneSpec(canvas=48, length=length, init_box=(14.0, 16.0, 10.0, 8.0), velocity=(1.0, 0.5))
    return generate_synthetic_video(spec)


def test_untrained_tiny_model_gives_finite_box_inside_frame():
    frames, boxes = _video(3)
    tracker = Tracker(SPMTrack(PRESETS["tiny"]))
    state = tracker.init(frames[0], boxes[0])
    bbox, state = tracker.track_step(state, frames[0])
    assert bbox.is_finite()
    assert 0 <= bbox.x and bbox.x + bbox.w <= 48 + 1e-9 and 0 <= bbox.y and bbox.y + bbox.h <= 48 + 1e-9


def test_one_frame_video_echoes_init():
    frames, boxes = _video(1)
    assert Tracker(SPMTrack(SMALL)).track(frames, boxes[0]) == [boxes[0]]


def test_state_token_carry():
    frames, boxes = _video(3)
    model = SPMTrack(SMALL)
    tracker = Tracker(model)
    state = tracker.init(frames[0], boxes[0])
    _, state = tracker.track_step(state, frames[1])
    np.testing.assert_array_equal(state.last_state_in[0], model.emb.state_token.data)
    carried = state.carried_state.data.copy()
    _, state = tracker.track_step(state, frames[2])
    np.testing.assert_array_equal(state.last_state_in, model.emb.state_token.data + carried)


def test_tracking_is_deterministic():
    frames, boxes = _video(8)
    a = Tracker(SPMTrack(SMALL, seed=3)).track(frames, boxes[0])
    b = Tracker(SPMTrack(SMALL, seed=3)).track(frames, boxes[0])
    assert [x.as_tuple() for x in a] == [x.as_tuple() for x in b]


def test_boxes_stay_inside_frame():
    frames, boxes = _video(10)
    model = SPMTrack(SMALL, seed=5)
    for w in model.head.reg.weights:
        w.data = w.data * 20  # push predictions toward the sigmoid extremes
    for b in Tracker(model).track(frames, boxes[0])[1:]:
        assert 0 <= b.x and b.x + b.w <= 48 + 1e-9 and 0 <= b.y and b.y + b.h <= 48 + 1e-9


def test_history_follows_keep_every():
    frames, boxes = _video(7)
    tracker = Tracker(SPMTrack(SMALL), keep_every=3)
    state = tracker.init(frames[0], boxes[0])
    for f in frames[1:]:
        _, state = tracker.track_step(state, f)
    assert sorted(state.history) == [0, 3, 6]


def test_non_finite_response_keeps_previous_box(caplog):
    frames, boxes = _video(3)
    model = SPMTrack(SMALL)
    model.head.cls.biases[-1].data[:] = np.nan
    tracker = Tracker(model)
    out = tracker.track(frames, boxes[0])
    assert out[1] == boxes[0] and out[2] == boxes[0]
    assert "non-finite" in caplog.text
