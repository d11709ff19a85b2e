import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vrsniff.errors import VrsniffError
from vrsniff.models import ModelSpec, TrainedModel
from vrsniff.reproduce import device_view
from vrsniff.synth import VOCABULARY, AppProfile, generate_trace
from vrsniff.timeline import (build_timeline, ground_truth_seconds, identify_app, infer_timeline, interval_iou,
                              segment_iou, smooth)

label_lists = st.lists(st.sampled_from("ABC"), min_size=1, max_size=60)


def uniform_proba(labels, classes):
    p = np.zeros((len(labels), len(classes)))
    for i, lab in enumerate(labels):
        p[i, classes.index(lab)] = 1.0
    return p


def timeline_of(labels, m=3, min_seg=2, start=4):
    classes = sorted(set(labels))
    return build_timeline(range(start, start + len(labels)), labels, uniform_proba(labels, classes), classes, m, min_seg)


# ---- smoothing ----------------------------------------------------------------

def test_isolated_label_is_smoothed_out():
    assert smooth(list("AAABAAA"), 3) == list("AAAAAAA")
    tl = timeline_of(list("AAABAAA"))
    assert [(s.label, s.length) for s in tl.segments] == [("A", 7)]


def test_constant_prediction_single_segment():
    tl = timeline_of(["A"] * 20)
    assert len(tl.segments) == 1 and (tl.segments[0].start_s, tl.segments[0].end_s) == (4, 24)


def test_tie_keeps_previous_label():
    # m = 2 windows are [i-1, i]; position 2 sees (A, B) and keeps A
    assert smooth(list("AABB"), 2) == list("AAAB")


@given(label_lists)
def test_m1_is_identity(labels):
    assert smooth(labels, 1) == labels
    tl = timeline_of(labels, m=1, min_seg=0)
    assert [lab for _, lab, _ in tl.per_second] == labels


@given(label_lists, st.integers(1, 7), st.permutations("ABC"))
def test_smoothing_is_permutation_equivariant(labels, m, perm):
    mapping = dict(zip("ABC", perm))
    assert smooth([mapping[x] for x in labels], m) == [mapping[x] for x in smooth(labels, m)]


def test_bad_smoothing_window():
    with pytest.raises(VrsniffError):
        smooth(["A"], 0)


# ---- segments -----------------------------------------------------------------

@given(label_lists, st.integers(1, 5), st.integers(0, 6))
def test_segments_tile_the_covered_range(labels, m, min_seg):
    tl = timeline_of(labels, m, min_seg)
    segs = tl.segments
    assert segs[0].start_s == 4 and segs[-1].end_s == 4 + len(labels)
    for a, b in zip(segs, segs[1:]):
        assert a.end_s == b.start_s and a.label != b.label
    assert all(0.0 <= s.mean_confidence <= 1.0 for s in segs)
    if len(segs) > 1:
        assert min(s.length for s in segs) >= min_seg
    assert [t for t, _, _ in tl.per_second] == list(range(4, 4 + len(labels)))


def test_short_segment_joins_longer_neighbour():
    labels = list("AAAAA") + ["B"] + list("CC")
    tl = timeline_of(labels, m=1, min_seg=2)
    assert [(s.label, s.start_s, s.end_s) for s in tl.segments] == [("A", 4, 10), ("C", 10, 12)]


def test_segment_confidence_is_mean_vote_share():
    classes = ["A", "B"]
    proba = np.array([[0.9, 0.1], [0.7, 0.3], [0.8, 0.2]])
    tl = build_timeline([0, 1, 2], ["A", "A", "A"], proba, classes, 1, 0)
    assert tl.segments[0].mean_confidence == pytest.approx(0.8)


def test_non_consecutive_seconds_rejected():
    with pytest.raises(VrsniffError):
        build_timeline([0, 2], ["A", "A"], np.ones((2, 1)), ["A"])


def test_timeline_serialisations():
    tl = timeline_of(list("AAAABBBB"), m=1)
    assert tl.to_json()["segments"][1] == {"start_s": 8, "end_s": 12, "label": "B", "mean_confidence": 1.0}
    assert tl.to_csv().splitlines()[:2] == ["t_s,label,confidence", "4,A,1"]


# ---- IoU ----------------------------------------------------------------------

def test_interval_iou():
    assert interval_iou((0, 10), (5, 15)) == pytest.approx(5 / 15)
    assert interval_iou((0, 10), (0, 10)) == 1.0
    assert interval_iou((0, 1), (2, 3)) == 0.0


def test_segment_iou_clips_to_covered_range():
    tl = timeline_of(["A"] * 6 + ["B"] * 10, m=1, start=4)
    ious = segment_iou(tl, [(0.0, 10.0, "A"), (10.0, 20.0, "B"), (25.0, 30.0, "A")])
    assert ious == [("A", 1.0), ("B", 1.0)]


# ---- trace-level inference ----------------------------------------------------

class FixedVotes:
    """Stand-in app model whose window predictions are scripted."""

    def __init__(self, votes):
        self.votes = votes
        from vrsniff.models import FeatureConfig
        self.feature_config = FeatureConfig()

    def predict(self, ds):
        return np.array(self.votes[:len(ds)], dtype=object)


def probe_trace(script, seed=4):
    acts = {n: VOCABULARY[n] for n in {"No Activity"} | {a for a, _ in script}}
    return device_view(generate_trace(AppProfile("probe", acts, script), seed))


def test_identify_app_unanimous_and_majority():
    trace = probe_trace((("Talking", 15.0),))
    label, conf, hist = identify_app(trace, FixedVotes(["x"] * 11))
    assert (label, conf) == ("x", 1.0) and hist == {"x": 11}
    label, conf, _ = identify_app(trace, FixedVotes(["y"] * 6 + ["z"] * 4 + ["y"]))
    assert label == "y" and conf == pytest.approx(7 / 11)
    label, conf, _ = identify_app(probe_trace((("Talking", 14.0),)), FixedVotes(["y"] * 6 + ["x"] * 4))
    assert (label, conf) == ("y", 0.6)


def test_identify_app_tie_goes_to_first_name():
    label, conf, _ = identify_app(probe_trace((("Talking", 14.0),)), FixedVotes(["z"] * 5 + ["b"] * 5))
    assert (label, conf) == ("b", 0.5)


def test_identify_app_too_short():
    with pytest.raises(VrsniffError) as exc:
        identify_app(probe_trace((("Talking", 3.0),)), FixedVotes(["x"]))
    assert exc.value.code == "TRACE_TOO_SHORT"


def test_timeline_on_trained_model(small_data):
    model = TrainedModel.fit(small_data, ModelSpec("forest", {"n_trees": 40, "seed": 0}), "activity")
    script = (("Walking", 30.0), ("Paused", 30.0))
    if not {"Walking", "Paused"} <= set(model.codec.labels):
        pytest.skip("corpus lacks the scripted activities")
    trace = probe_trace(script, seed=9)
    tl = infer_timeline(trace, model)
    assert tl.segments[0].start_s == 4 and tl.segments[-1].end_s == 60
    # fidelity on every interval is an acceptance check on the full corpus; this
    # small model only has to place the busy interval
    assert dict(segment_iou(tl, ground_truth_seconds(trace)))["Walking"] >= 0.8
