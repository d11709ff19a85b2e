import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vrsniff.capture import detect_vr_device, format_csv, parse_csv, parse_pcap, write_pcap
from vrsniff.errors import VrsniffError
from vrsniff.features import extract_windows
from vrsniff.models import ModelSpec, TrainedModel
from vrsniff.reproduce import device_view, featurize_corpus
from vrsniff.synth import (HEADSET_MAC, NO_ACTIVITY, VOCABULARY, ActivityProfile, AppProfile, XorShift64Star,
                           generate_corpus, generate_trace, make_app_profiles, profiles_from_json,
                           profiles_to_json, splitmix64)
from vrsniff.timeline import identify_app

M64 = (1 << 64) - 1


def reference_xorshift(seed, n):
    """xorshift64* written out from its published definition."""
    z = (seed + 0x9E3779B97F4A7C15) & M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    x = (z ^ (z >> 31)) or 0x9E3779B97F4A7C15
    out = []
    for _ in range(n):
        x ^= x >> 12
        x ^= (x << 25) & M64
        x ^= x >> 27
        out.append((x * 0x2545F4914F6CDD1D) & M64)
    return out


def test_splitmix64_known_value():
    assert splitmix64(0) == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 1, 7, 2**63 + 5])
def test_prng_matches_reference(seed):
    rng = XorShift64Star(seed)
    assert [rng.next_u64() for _ in range(20)] == reference_xorshift(seed, 20)


@given(st.integers(0, 2**64 - 1), st.integers(1, 1000))
def test_prng_helpers_in_range(seed, n):
    rng = XorShift64Star(seed)
    assert 0 <= rng.below(n) < n
    assert 0.0 <= rng.random() < 1.0
    assert rng.expovariate(3.0) >= 0.0


def simple_app(rate=100.0, seconds=60.0):
    prof = ActivityProfile("Steady", rate, 1.0, 0.0, 1.0, 500.0, 50.0, 0.5)
    return AppProfile("steady", {NO_ACTIVITY: VOCABULARY[NO_ACTIVITY], "Steady": prof}, (("Steady", seconds),))


def test_same_seed_gives_identical_csv():
    app = make_app_profiles(3, seed=2, session_s=120)[0]
    assert format_csv(generate_trace(app, 5)) == format_csv(generate_trace(app, 5))
    assert format_csv(generate_trace(app, 5)) != format_csv(generate_trace(app, 6))


def test_poisson_count_concentrates():
    trace = device_view(generate_trace(simple_app(), 11))
    n = sum(1 for r in trace.records if r.dns_query is None)
    assert abs(n - 6000) <= 4 * math.sqrt(6000)


def test_fist_outpaces_idle_in_max_bits():
    idle = ActivityProfile(NO_ACTIVITY, 1.0, 1.0, 0.0, 1.0, 300.0, 100.0, 0.5)
    fist = ActivityProfile("Making A Fist", 200.0, 2.0, 0.5, 1.5, 900.0, 180.0, 0.6)
    app = AppProfile("f", {NO_ACTIVITY: idle, "Making A Fist": fist}, ((NO_ACTIVITY, 30.0), ("Making A Fist", 30.0)))
    ds = extract_windows(device_view(generate_trace(app, 3)))
    f12 = ds.X[:, ds.col("f12")]
    assert f12[ds.activity == "Making A Fist"].min() > f12[ds.activity == NO_ACTIVITY].max()


@given(st.integers(0, 10_000), st.floats(5.0, 200.0))
def test_intervals_tile_duration(seed, total):
    app = make_app_profiles(2, seed=seed % 50, session_s=90)[0]
    trace = generate_trace(app, seed, total)
    ivs = trace.intervals
    assert ivs[0].start_us == 1_700_000_000 * 1_000_000
    assert ivs[-1].end_us == ivs[0].start_us + round(total * 1_000_000)
    assert all(a.end_us == b.start_us for a, b in zip(ivs, ivs[1:]))


@given(st.integers(0, 10_000))
def test_generated_traces_satisfy_ingest_invariants(seed):
    app = make_app_profiles(2, seed=seed % 20, session_s=20)[1]
    trace = generate_trace(app, seed, 20, bystander_rate=5.0)
    ts = trace.timestamps
    assert (np.diff(ts) >= 0).all() and (trace.lengths >= 60).all() and (trace.lengths <= 1500).all()
    assert detect_vr_device(trace)[0].mac == HEADSET_MAC
    assert parse_csv(format_csv(trace)).records == trace.records
    back = parse_pcap(write_pcap(trace))
    assert [(r.timestamp, r.frame_length, r.src_mac) for r in back.records] == \
        [(r.timestamp, r.frame_length, r.src_mac) for r in trace.records]


def test_corpus_shape():
    apps = make_app_profiles(10, seed=7)
    assert len(apps) == 10 and len({a.name for a in apps}) == 10
    for a in apps:
        assert 3 <= len(a.activities) <= 5 and NO_ACTIVITY in a.activities
        assert a.script_length_s == pytest.approx(600.0)
    sharing = [a for a in apps if "Talking" in a.activities]
    assert len(sharing) >= 2


def test_shared_activity_rows_exist_across_apps(small_data):
    apps_with = {}
    for act, app in zip(small_data.activity, small_data.app):
        apps_with.setdefault(act, set()).add(app)
    assert any(len(v) >= 2 for k, v in apps_with.items() if k != NO_ACTIVITY)


def test_overlap_collapses_offsets():
    for a in make_app_profiles(6, seed=1, overlap=1.0):
        assert a.base_rate_offset == 0.0 and a.base_size_offset == 0.0
    offsets = {(a.base_rate_offset, a.base_size_offset) for a in make_app_profiles(6, seed=1, overlap=0.0)}
    assert len(offsets) == 6


def test_profile_json_round_trip():
    apps = make_app_profiles(3, seed=4, session_s=100)
    assert profiles_from_json(profiles_to_json(apps)) == apps


@pytest.mark.parametrize("bad", [
    lambda: ActivityProfile("x", 0.0).validate(),
    lambda: ActivityProfile("x", 10.0, size_mean=20.0).validate(),
    lambda: AppProfile("a", {"Walking": VOCABULARY["Walking"]}, (("Walking", 5.0),)).validate(),
    lambda: AppProfile("a", dict(VOCABULARY), (("Walking", -1.0),)).validate(),
    lambda: profiles_from_json({"apps": [{"name": "x"}]}),
])
def test_bad_profiles(bad):
    with pytest.raises(VrsniffError) as exc:
        bad()
    assert exc.value.code == "BAD_PROFILE"


def test_bad_corpus_config():
    with pytest.raises(VrsniffError) as exc:
        generate_corpus(1)
    assert exc.value.code == "BAD_CONFIG"


def test_identify_app_on_fresh_session(small_corpus, small_data):
    model = TrainedModel.fit(small_data, ModelSpec("forest", {"n_trees": 60, "seed": 0}), "app")
    profile = make_app_profiles(4, seed=3, session_s=180.0)[2]
    label, conf, _ = identify_app(device_view(generate_trace(profile, 999, 180.0)), model)
    assert label == profile.name and conf >= 0.8
