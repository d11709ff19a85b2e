import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from factories import GATEWAY, HEADSET, PHONE, random_records
from vrsniff.capture import (ActivityInterval, Direction, PacketRecord, Trace, Transport, detect_vr_device,
                             filter_device, format_csv, load_trace, parse_csv, parse_pcap, save_trace,
                             write_pcap)
from vrsniff.errors import VrsniffError

PCAP_FIELDS = ("timestamp", "frame_length", "src_mac", "dst_mac", "src_ip", "dst_ip", "transport", "dns_query")


def fields(r):
    return tuple(getattr(r, f) for f in PCAP_FIELDS)


# ---- pcap ---------------------------------------------------------------------

@pytest.mark.parametrize("order", ["<", ">"])
def test_pcap_round_trip(order):
    recs = random_records(500, 11)
    back = parse_pcap(write_pcap(recs, order))
    assert [fields(r) for r in back.records] == [fields(r) for r in recs]
    assert back.dropped_frames == 0


def test_byte_swapped_capture_parses_identically():
    recs = random_records(200, 5)
    le, be = write_pcap(recs, "<"), write_pcap(recs, ">")
    assert le[:4] == bytes.fromhex("d4c3b2a1") and be[:4] == bytes.fromhex("a1b2c3d4")
    assert parse_pcap(le).records == parse_pcap(be).records


def test_empty_capture_is_global_header_only():
    data = write_pcap([])
    assert len(data) == 24
    assert struct.unpack("<I", data[:4])[0] == 0xA1B2C3D4
    assert len(parse_pcap(data)) == 0


def test_nanosecond_capture_truncates_to_microseconds():
    recs = random_records(20, 2)
    data = bytearray(write_pcap(recs))
    struct.pack_into("<I", data, 0, 0xA1B23C4D)
    pos = 24
    for r in recs:
        sec, frac, incl, orig = struct.unpack_from("<IIII", data, pos)
        struct.pack_into("<I", data, pos + 4, frac * 1000 + 999)
        pos += 16 + incl
    back = parse_pcap(bytes(data))
    assert [r.timestamp for r in back.records] == [r.timestamp for r in recs]


def test_truncated_final_frame_is_dropped_and_counted():
    recs = random_records(10, 3)
    data = write_pcap(recs)
    back = parse_pcap(data[:-5])
    assert len(back) == 9 and back.dropped_frames == 1
    assert [fields(r) for r in back.records] == [fields(r) for r in recs[:9]]


def test_vlan_tag_is_skipped():
    rec = PacketRecord(5_000_000, 200, HEADSET, GATEWAY, "10.0.0.2", "10.0.0.1", Transport.TCP)
    data = write_pcap([rec])
    frame = data[40:]
    tagged = frame[:12] + struct.pack("!HH", 0x8100, 7) + frame[12:]
    hdr = struct.pack("<IIII", 5, 0, len(tagged), 200)
    back = parse_pcap(data[:24] + hdr + tagged)
    assert fields(back.records[0]) == fields(rec)


@pytest.mark.parametrize("data", [b"", b"\x00" * 10, b"\x00" * 24, b"\xd4\xc3\xb2\xa1" + b"\x00" * 10])
def test_bad_global_header(data):
    with pytest.raises(VrsniffError) as exc:
        parse_pcap(data)
    assert exc.value.code == "MALFORMED_HEADER"


def test_short_frame_still_yields_record():
    hdr = struct.pack("<IIII", 1, 0, 6, 60)
    data = write_pcap([])[:24] + hdr + b"\x01" * 6
    (rec,) = parse_pcap(data).records
    assert rec.transport is Transport.OTHER and rec.frame_length == 60


def test_records_sorted_by_timestamp():
    recs = random_records(50, 9)
    back = parse_pcap(write_pcap(list(reversed(recs))))
    ts = [r.timestamp for r in back.records]
    assert ts == sorted(ts)


# ---- canonical CSV ------------------------------------------------------------

def labelled_trace():
    recs = random_records(300, 21)
    t0 = recs[0].timestamp
    ivs = (ActivityInterval(t0, t0 + 2_000_000, "Talking"), ActivityInterval(t0 + 2_000_000, t0 + 5_000_000, "Walking"))
    return Trace(tuple(recs), "app-x", ivs)


def test_csv_round_trip_records():
    trace = labelled_trace()
    back = parse_csv(format_csv(trace))
    assert back.records == trace.records
    assert back.app == "app-x"


def test_csv_header_only_is_empty():
    assert len(parse_csv(format_csv(Trace(())))) == 0


def test_pcap_export_reimported_via_csv():
    parsed = parse_pcap(write_pcap(random_records(100, 4)))
    assert parse_csv(format_csv(parsed)).records == parsed.records


def test_sidecar_restores_exact_intervals(tmp_path):
    trace = labelled_trace()
    save_trace(trace, tmp_path / "t.csv")
    back = load_trace(tmp_path / "t.csv")
    assert back.intervals == trace.intervals and back.records == trace.records


@pytest.mark.parametrize("header", ["", "a,b,c\n", "timestamp,frame_length\n"])
def test_bad_header(header):
    with pytest.raises(VrsniffError) as exc:
        parse_csv(header)
    assert exc.value.code == "BAD_HEADER"


@pytest.mark.parametrize("bad,field", [("-5", 1), ("0", 1), ("x", 0), ("zz:zz", 2), ("999.1.1.1", 4)])
def test_bad_row_reports_first_offending_line(bad, field):
    lines = format_csv(labelled_trace()).splitlines()
    row = lines[3].split(",")
    row[field] = bad
    lines[3] = ",".join(row)
    with pytest.raises(VrsniffError) as exc:
        parse_csv("\n".join(lines))
    assert exc.value.code == "BAD_ROW" and exc.value.context["line"] == 4


# ---- device detection -------------------------------------------------------

def rec(t, src, dst, dns=None):
    return PacketRecord(t, 100, src, dst, "10.0.0.2", "10.0.0.1", Transport.UDP, Direction.UNKNOWN, dns)


def test_headset_with_oculus_query_scores_three():
    trace = Trace((rec(1, PHONE, GATEWAY), rec(2, HEADSET, GATEWAY, "graph.oculus.com"), rec(3, GATEWAY, HEADSET)))
    ranked = detect_vr_device(trace)
    assert (ranked[0].mac, ranked[0].score) == (HEADSET, 3)
    assert len(ranked[0].reasons) == 2


def test_no_evidence_keeps_first_appearance_order():
    trace = Trace((rec(1, PHONE, GATEWAY), rec(2, "02:00:00:00:00:09", PHONE)))
    ranked = detect_vr_device(trace)
    assert [d.mac for d in ranked] == [PHONE, GATEWAY, "02:00:00:00:00:09"]
    assert all(d.score == 0 for d in ranked)


def test_oui_match_outranks_single_dns_match():
    other_headset = "b4:17:a8:00:00:01"
    trace = Trace((rec(1, PHONE, GATEWAY, "www.meta.com"), rec(2, other_headset, GATEWAY)))
    scores = {d.mac: d.score for d in detect_vr_device(trace)}
    assert [d.mac for d in detect_vr_device(trace)][:2] == [other_headset, PHONE]
    assert scores == {other_headset: 2, PHONE: 1, GATEWAY: 0}


def test_repeated_domain_counts_once():
    trace = Trace(tuple(rec(i, PHONE, GATEWAY, "graph.oculus.com") for i in range(5)))
    assert detect_vr_device(trace)[0].score == 1


def test_detect_empty_trace():
    with pytest.raises(VrsniffError) as exc:
        detect_vr_device(Trace(()))
    assert exc.value.code == "EMPTY_TRACE"


@given(st.permutations(list(range(40))))
def test_detect_scores_invariant_under_reordering(perm):
    base = random_records(40, 8)
    shuffled = [base[i] for i in perm]
    score = lambda recs: {d.mac: d.score for d in detect_vr_device(Trace(tuple(recs)))}
    assert score(base) == score(shuffled)


def test_filter_device_matches_naive_scan():
    recs = random_records(400, 13)
    out = filter_device(Trace(tuple(recs)), HEADSET)
    expected = [r for r in recs if HEADSET in (r.src_mac, r.dst_mac)]
    assert len(out) == len(expected)
    for got, want in zip(out.records, expected):
        assert got.timestamp == want.timestamp
        assert got.direction is (Direction.UPLINK if want.src_mac == HEADSET else Direction.DOWNLINK)


def test_filter_identity_when_every_frame_involves_mac():
    recs = [rec(i, HEADSET if i % 2 else GATEWAY, GATEWAY if i % 2 else HEADSET) for i in range(10)]
    trace = Trace(tuple(recs), "a", (ActivityInterval(0, 5, "x"),))
    out = filter_device(trace, HEADSET.upper())
    assert len(out) == 10 and out.app == "a" and out.intervals == trace.intervals


def test_filter_unknown_mac():
    with pytest.raises(VrsniffError) as exc:
        filter_device(Trace((rec(1, PHONE, GATEWAY),)), HEADSET)
    assert exc.value.code == "UNKNOWN_MAC"


@given(st.integers(0, 2**32 - 1), st.sampled_from([HEADSET, GATEWAY, PHONE]))
def test_filter_is_ordered_subsequence(seed, mac):
    recs = random_records(60, seed)
    out = filter_device(Trace(tuple(recs)), mac)
    ts = [r.timestamp for r in out.records]
    assert ts == sorted(ts)
    it = iter((r.timestamp, r.frame_length) for r in recs)
    assert all(any(x == (r.timestamp, r.frame_length) for x in it) for r in out.records)


def test_overlapping_intervals_rejected():
    with pytest.raises(VrsniffError) as exc:
        Trace((), intervals=(ActivityInterval(0, 10, "a"), ActivityInterval(5, 20, "b")))
    assert exc.value.code == "BAD_INTERVAL"
