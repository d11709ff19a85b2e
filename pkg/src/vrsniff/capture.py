"""Capture ingest: classic pcap and canonical CSV traces, headset detection.

A :class:`Trace` is an ordered, immutable sequence of :class:`PacketRecord`
plus optional ground-truth labels. Only metadata is ever decoded (addresses,
lengths, timestamps and DNS query names); payloads are treated as opaque.
"""
from __future__ import annotations

import bisect
import csv
import enum
import fnmatch
import io
import ipaddress
import json
import logging
import re
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import VrsniffError
from .outputs import write_atomic

log = logging.getLogger(__name__)

US_PER_S = 1_000_000

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
DEFAULT_SNAPLEN = 262144

ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
ETH_VLAN = (0x8100, 0x88A8)
ETH_OPAQUE = 0x88B5  # IEEE local experimental, used for records without IP

CSV_COLUMNS = (
    "timestamp_us", "frame_length", "src_mac", "dst_mac", "src_ip", "dst_ip",
    "transport", "direction", "app_label", "activity_label",
)
CSV_DNS_COLUMN = "dns_query"

DEFAULT_VR_OUIS = ("b4:17:a8",)
DEFAULT_DNS_INDICATORS = (
    "graph.oculus.com", "*.oculus.com", "*.meta.com", "cdp.cloud.unity3d.com",
)

_MAC_RE = re.compile(r"^[0-9a-f]{2}(:[0-9a-f]{2}){5}$")


class Transport(str, enum.Enum):
    TCP = "TCP"
    UDP = "UDP"
    OTHER = "OTHER"


class Direction(str, enum.Enum):
    UPLINK = "UPLINK"
    DOWNLINK = "DOWNLINK"
    UNKNOWN = "UNKNOWN"


@dataclass(frozen=True, slots=True)
class PacketRecord:
    timestamp: int  # microseconds since capture epoch
    frame_length: int
    src_mac: str
    dst_mac: str
    src_ip: str | None = None
    dst_ip: str | None = None
    transport: Transport = Transport.OTHER
    direction: Direction = Direction.UNKNOWN
    dns_query: str | None = None


@dataclass(frozen=True, slots=True)
class ActivityInterval:
    start_us: int
    end_us: int
    label: str

    def __post_init__(self):
        if not self.start_us < self.end_us:
            raise VrsniffError("BAD_INTERVAL", f"start {self.start_us} >= end {self.end_us}")
        if not self.label:
            raise VrsniffError("BAD_INTERVAL", "empty activity label")

    def covers(self, t_us: float) -> bool:
        return self.start_us <= t_us < self.end_us


@dataclass(frozen=True)
class Trace:
    records: tuple[PacketRecord, ...]
    app: str | None = None
    intervals: tuple[ActivityInterval, ...] = ()
    dropped_frames: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ivs = tuple(sorted(self.intervals, key=lambda iv: iv.start_us))
        for a, b in zip(ivs, ivs[1:]):
            if b.start_us < a.end_us:
                raise VrsniffError("BAD_INTERVAL", f"overlapping intervals {a} and {b}")
        object.__setattr__(self, "intervals", ivs)

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def timestamps(self) -> np.ndarray:
        return np.fromiter((r.timestamp for r in self.records), dtype=np.int64, count=len(self.records))

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.fromiter((r.frame_length for r in self.records), dtype=np.int64, count=len(self.records))

    @cached_property
    def uplink(self) -> np.ndarray:
        return np.fromiter((r.direction is Direction.UPLINK for r in self.records), dtype=bool,
                           count=len(self.records))

    @cached_property
    def _interval_starts(self) -> list[int]:
        return [iv.start_us for iv in self.intervals]

    def label_at(self, t_us: float) -> str | None:
        """Activity label of the interval covering ``t_us``, if any."""
        i = bisect.bisect_right(self._interval_starts, t_us) - 1
        if i >= 0 and self.intervals[i].covers(t_us):
            return self.intervals[i].label
        return None

    def with_records(self, records: Iterable[PacketRecord]) -> "Trace":
        return Trace(tuple(records), self.app, self.intervals, self.dropped_frames)


def _sorted_trace(records: list[PacketRecord], **meta) -> Trace:
    records.sort(key=lambda r: r.timestamp)  # stable: same-microsecond bursts keep file order
    return Trace(tuple(records), **meta)


# --------------------------------------------------------------------------
# pcap
# --------------------------------------------------------------------------

def _mac(b: bytes) -> str:
    return b.hex(":")


def _mac_bytes(mac: str) -> bytes:
    return bytes.fromhex(mac.replace(":", ""))


def _dns_qname(payload: bytes) -> str | None:
    if len(payload) < 12:
        return None
    flags, qdcount = struct.unpack_from("!HH", payload, 2)
    if flags & 0x8000 or qdcount == 0:
        return None
    labels = []
    pos = 12
    while pos < len(payload):
        n = payload[pos]
        if n == 0:
            break
        if n & 0xC0 or pos + 1 + n > len(payload):
            return None
        labels.append(payload[pos + 1:pos + 1 + n].decode("ascii", "replace"))
        pos += 1 + n
    else:
        return None
    return ".".join(labels).lower() or None


def _decode_frame(ts: int, orig_len: int, data: bytes) -> PacketRecord:
    if len(data) < 14:
        zero = "00:00:00:00:00:00"
        return PacketRecord(ts, orig_len, zero, zero)
    dst_mac, src_mac = _mac(data[0:6]), _mac(data[6:12])
    ethertype = struct.unpack_from("!H", data, 12)[0]
    off = 14
    while ethertype in ETH_VLAN and len(data) >= off + 4:
        ethertype = struct.unpack_from("!H", data, off + 2)[0]
        off += 4
    src_ip = dst_ip = None
    proto = None
    if ethertype == ETH_IPV4 and len(data) >= off + 20:
        ihl = (data[off] & 0x0F) * 4
        proto = data[off + 9]
        src_ip = str(ipaddress.IPv4Address(data[off + 12:off + 16]))
        dst_ip = str(ipaddress.IPv4Address(data[off + 16:off + 20]))
        off += max(ihl, 20)
    elif ethertype == ETH_IPV6 and len(data) >= off + 40:
        proto = data[off + 6]
        src_ip = str(ipaddress.IPv6Address(data[off + 8:off + 24]))
        dst_ip = str(ipaddress.IPv6Address(data[off + 24:off + 40]))
        off += 40
    if proto == 6:
        transport = Transport.TCP
    elif proto == 17:
        transport = Transport.UDP
    else:
        transport = Transport.OTHER
    dns = None
    if transport is Transport.UDP and len(data) >= off + 8:
        dport = struct.unpack_from("!H", data, off + 2)[0]
        if dport == 53:
            dns = _dns_qname(data[off + 8:])
    return PacketRecord(ts, orig_len, src_mac, dst_mac, src_ip, dst_ip, transport, Direction.UNKNOWN, dns)


def parse_pcap(data: bytes) -> Trace:
    """Decode a classic (non-ng) Ethernet pcap capture.

    Nanosecond-resolution captures are truncated to microseconds. A final
    frame cut short by the end of the file is dropped and counted in
    ``Trace.dropped_frames``.
    """
    if len(data) < GLOBAL_HEADER_LEN:
        raise VrsniffError("MALFORMED_HEADER", "truncated global header")
    magic_le = struct.unpack_from("<I", data, 0)[0]
    magic_be = struct.unpack_from(">I", data, 0)[0]
    if magic_le in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
        endian, magic = "<", magic_le
    elif magic_be in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
        endian, magic = ">", magic_be
    else:
        raise VrsniffError("MALFORMED_HEADER", f"bad magic 0x{magic_le:08x}")
    nanos = magic == PCAP_MAGIC_NS
    linktype = struct.unpack_from(endian + "I", data, 20)[0] & 0x0FFFFFFF
    if linktype != LINKTYPE_ETHERNET:
        raise VrsniffError("MALFORMED_HEADER", f"unsupported link type {linktype}")

    rec_hdr = struct.Struct(endian + "IIII")
    records = []
    dropped = 0
    pos = GLOBAL_HEADER_LEN
    end = len(data)
    while pos < end:
        if pos + RECORD_HEADER_LEN > end:
            dropped += 1
            break
        ts_sec, ts_frac, incl_len, orig_len = rec_hdr.unpack_from(data, pos)
        pos += RECORD_HEADER_LEN
        if pos + incl_len > end:
            dropped += 1
            break
        ts = ts_sec * US_PER_S + (ts_frac // 1000 if nanos else ts_frac)
        records.append(_decode_frame(ts, max(orig_len, 1), bytes(data[pos:pos + incl_len])))
        pos += incl_len
    if dropped:
        log.warning("dropped %d truncated trailing frame(s)", dropped)
    return _sorted_trace(records, dropped_frames=dropped)


def _dns_payload(qname: str) -> bytes:
    body = b"".join(bytes([len(p)]) + p.encode("ascii") for p in qname.split(".") if p)
    return struct.pack("!HHHHHH", 0x1D5E, 0x0100, 1, 0, 0, 0) + body + b"\x00" + struct.pack("!HH", 1, 1)


def _encode_frame(r: PacketRecord) -> bytes:
    eth = _mac_bytes(r.dst_mac) + _mac_bytes(r.src_mac)
    if r.src_ip is None or r.dst_ip is None:
        return eth + struct.pack("!H", ETH_OPAQUE)
    src, dst = ipaddress.ip_address(r.src_ip), ipaddress.ip_address(r.dst_ip)
    if src.version != dst.version:
        return eth + struct.pack("!H", ETH_OPAQUE)
    if r.transport is Transport.TCP:
        l4 = struct.pack("!HHIIBBHHH", 50000, 443, 0, 0, 5 << 4, 0x10, 65535, 0, 0)
        proto = 6
    elif r.transport is Transport.UDP:
        payload = _dns_payload(r.dns_query) if r.dns_query else b""
        dport = 53 if r.dns_query else 443
        l4 = struct.pack("!HHHH", 50000, dport, 8 + len(payload), 0) + payload
        proto = 17
    else:
        l4 = b""
        proto = 1 if src.version == 4 else 58
    ip_payload_len = max(r.frame_length - 14 - (20 if src.version == 4 else 40), len(l4))
    if src.version == 4:
        total = min(20 + ip_payload_len, 0xFFFF)
        ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, 0, 0, 64, proto, 0, src.packed, dst.packed)
        return eth + struct.pack("!H", ETH_IPV4) + ip + l4
    ip = struct.pack("!IHBB16s16s", 6 << 28, min(ip_payload_len, 0xFFFF), proto, 64, src.packed, dst.packed)
    return eth + struct.pack("!H", ETH_IPV6) + ip + l4


def write_pcap(trace: Trace | Sequence[PacketRecord], byteorder: str = "<") -> bytes:
    """Serialise records as a classic microsecond pcap.

    Only headers are captured (payload is zero-length beyond them), the way a
    short snaplen capture looks; ``orig_len`` carries the true frame length.
    """
    records = trace.records if isinstance(trace, Trace) else trace
    out = io.BytesIO()
    out.write(struct.pack(byteorder + "IHHiIII", PCAP_MAGIC_US, 2, 4, 0, 0, DEFAULT_SNAPLEN, LINKTYPE_ETHERNET))
    hdr = struct.Struct(byteorder + "IIII")
    for r in records:
        frame = _encode_frame(r)[:r.frame_length]
        sec, usec = divmod(r.timestamp, US_PER_S)
        out.write(hdr.pack(sec, usec, len(frame), r.frame_length))
        out.write(frame)
    return out.getvalue()


# --------------------------------------------------------------------------
# canonical CSV
# --------------------------------------------------------------------------

def _intervals_from_rows(ts: list[int], labels: list[str]) -> list[ActivityInterval]:
    runs = []
    for t, lab in zip(ts, labels):
        if runs and runs[-1][2] == lab:
            runs[-1][1] = t
        else:
            runs.append([t, t, lab])
    out = []
    for i, (start, last, lab) in enumerate(runs):
        if not lab:
            continue
        end = runs[i + 1][0] if i + 1 < len(runs) else last + 1
        if out and start < out[-1].end_us:
            start = out[-1].end_us
        end = max(end, start + 1)
        out.append(ActivityInterval(start, end, lab))
    return out


def _opt_ip(value: str, line: int) -> str | None:
    if not value:
        return None
    try:
        return str(ipaddress.ip_address(value))
    except ValueError:
        raise VrsniffError("BAD_ROW", f"line {line}: bad IP address {value!r}", line=line) from None


def parse_csv(data: bytes | str) -> Trace:
    """Read a canonical CSV trace (see :data:`CSV_COLUMNS`).

    Activity intervals are rebuilt from runs of equal ``activity_label``; a
    ``<file>.labels.json`` sidecar (see :func:`load_trace`) gives exact ones.
    """
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader, None)
    if header is None or tuple(header[:len(CSV_COLUMNS)]) != CSV_COLUMNS \
            or header[len(CSV_COLUMNS):] not in ([], [CSV_DNS_COLUMN]):
        raise VrsniffError("BAD_HEADER", f"expected header {','.join(CSV_COLUMNS)}")
    ncol = len(header)
    records, ts_list, acts = [], [], []
    app = None
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != ncol:
            raise VrsniffError("BAD_ROW", f"line {line}: expected {ncol} fields", line=line)
        try:
            ts = int(row[0])
            length = int(row[1])
            transport = Transport(row[6])
            direction = Direction(row[7])
        except ValueError:
            raise VrsniffError("BAD_ROW", f"line {line}: unparseable field", line=line) from None
        if ts < 0 or length < 1:
            raise VrsniffError("BAD_ROW", f"line {line}: negative timestamp or length < 1", line=line)
        src_mac, dst_mac = row[2].lower(), row[3].lower()
        if not (_MAC_RE.match(src_mac) and _MAC_RE.match(dst_mac)):
            raise VrsniffError("BAD_ROW", f"line {line}: bad MAC address", line=line)
        dns = (row[10] or None) if ncol > len(CSV_COLUMNS) else None
        records.append(PacketRecord(ts, length, src_mac, dst_mac, _opt_ip(row[4], line), _opt_ip(row[5], line),
                                    transport, direction, dns))
        if row[8] and app is None:
            app = row[8]
        ts_list.append(ts)
        acts.append(row[9])
    order = sorted(range(len(records)), key=lambda i: records[i].timestamp)
    ts_sorted = [ts_list[i] for i in order]
    acts_sorted = [acts[i] for i in order]
    return Trace(tuple(records[i] for i in order), app, tuple(_intervals_from_rows(ts_sorted, acts_sorted)))


def format_csv(trace: Trace) -> str:
    """Canonical CSV text; a trailing ``dns_query`` column appears only when needed."""
    with_dns = any(r.dns_query for r in trace.records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS + ((CSV_DNS_COLUMN,) if with_dns else ()))
    app = trace.app or ""
    for r in trace.records:
        row = [r.timestamp, r.frame_length, r.src_mac, r.dst_mac, r.src_ip or "", r.dst_ip or "",
               r.transport.value, r.direction.value, app, trace.label_at(r.timestamp) or ""]
        if with_dns:
            row.append(r.dns_query or "")
        w.writerow(row)
    return buf.getvalue()


def labels_sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".labels.json")


def save_trace(trace: Trace, path: str | Path) -> None:
    """Write canonical CSV plus the exact-label sidecar when labels exist."""
    write_atomic(path, format_csv(trace))
    if trace.app is not None or trace.intervals:
        meta = {"app": trace.app,
                "intervals": [[iv.start_us, iv.end_us, iv.label] for iv in trace.intervals]}
        write_atomic(labels_sidecar(path), json.dumps(meta, indent=1) + "\n")


def load_trace(path: str | Path, fmt: str | None = None) -> Trace:
    """Load a pcap or CSV trace from disk, honouring a labels sidecar."""
    path = Path(path)
    data = path.read_bytes()
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "pcap"
    trace = parse_csv(data) if fmt == "csv" else parse_pcap(data)
    side = labels_sidecar(path)
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        trace = Trace(trace.records, meta.get("app"),
                      tuple(ActivityInterval(*iv) for iv in meta.get("intervals", [])), trace.dropped_frames)
    return trace


# --------------------------------------------------------------------------
# device identification
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DeviceEvidence:
    mac: str
    score: int
    reasons: tuple[str, ...]


def detect_vr_device(trace: Trace, ouis: Sequence[str] = DEFAULT_VR_OUIS,
                     dns_indicators: Sequence[str] = DEFAULT_DNS_INDICATORS) -> list[DeviceEvidence]:
    """Rank every MAC in the trace by how strongly it looks like a VR headset.

    A vendor OUI match scores 2; each distinct queried domain matching any DNS
    indicator pattern scores 1. Ties keep first-appearance order.
    """
    if not trace.records:
        raise VrsniffError("EMPTY_TRACE", "cannot detect devices in an empty trace")
    ouis = tuple(o.lower() for o in ouis)
    patterns = tuple(p.lower() for p in dns_indicators)
    seen: dict[str, None] = {}
    queried: dict[str, set[str]] = {}
    for r in trace.records:
        seen.setdefault(r.src_mac)
        seen.setdefault(r.dst_mac)
        if r.dns_query:
            queried.setdefault(r.src_mac, set()).add(r.dns_query.lower().rstrip("."))
    ranked = []
    for mac in seen:
        score, reasons = 0, []
        if mac[:8] in ouis:
            score += 2
            reasons.append(f"OUI {mac[:8]} is a known VR vendor prefix")
        for name in sorted(queried.get(mac, ())):
            hits = [p for p in patterns if fnmatch.fnmatchcase(name, p)]
            if hits:
                score += 1
                reasons.append(f"queried {name} (matches {hits[0]})")
        ranked.append(DeviceEvidence(mac, score, tuple(reasons)))
    ranked.sort(key=lambda d: -d.score)  # stable sort preserves first appearance
    return ranked


def filter_device(trace: Trace, mac: str) -> Trace:
    """Keep only frames to or from ``mac`` and tag their direction."""
    mac = mac.lower()
    kept = []
    for r in trace.records:
        if r.src_mac == mac:
            kept.append(replace(r, direction=Direction.UPLINK))
        elif r.dst_mac == mac:
            kept.append(replace(r, direction=Direction.DOWNLINK))
    if not kept:
        raise VrsniffError("UNKNOWN_MAC", f"{mac} does not appear in the trace")
    return trace.with_records(kept)
