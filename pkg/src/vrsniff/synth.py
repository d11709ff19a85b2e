"""Seeded synthetic VR-like traffic.

Every random draw comes from :class:`XorShift64Star`, a fixed 64-bit
generator, so a (profile, seed) pair yields the same trace on any platform.

Arrivals follow a modulated Poisson process: each activity has a base packet
rate that is multiplied by ``rate_burstiness`` while a burst is active; burst
onsets are themselves Poisson with intensity ``burst_rate_hz`` and last
``burst_len_s``. Frame sizes are normal draws clamped to [60, 1500] bytes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .capture import ActivityInterval, PacketRecord, Trace, Transport, US_PER_S, write_pcap  # noqa: F401
from .errors import VrsniffError

MASK64 = (1 << 64) - 1
NO_ACTIVITY = "No Activity"

HEADSET_MAC = "b4:17:a8:6d:9d:eb"
GATEWAY_MAC = "00:1a:2b:3c:4d:5e"
BYSTANDER_MAC = "3c:22:fb:10:20:30"
HEADSET_IP = "192.168.1.23"
GATEWAY_IP = "192.168.1.1"
BYSTANDER_IP = "192.168.1.40"
TRACE_EPOCH_S = 1_700_000_000
MIN_FRAME, MAX_FRAME = 60, 1500


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D), seeded via splitmix64."""

    MULTIPLIER = 0x2545F4914F6CDD1D

    def __init__(self, seed: int):
        self.state = splitmix64(seed & MASK64) or 0x9E3779B97F4A7C15
        self._spare_normal = None

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * self.MULTIPLIER) & MASK64

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, a: float, b: float) -> float:
        return a + (b - a) * self.random()

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        limit = MASK64 - (MASK64 + 1) % n
        while True:
            v = self.next_u64()
            if v <= limit:
                return v % n

    def expovariate(self, rate: float) -> float:
        return -math.log(1.0 - self.random()) / rate

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        if self._spare_normal is not None:
            z, self._spare_normal = self._spare_normal, None
        else:
            r = math.sqrt(-2.0 * math.log(1.0 - self.random()))
            theta = 2.0 * math.pi * self.random()
            z, self._spare_normal = r * math.cos(theta), r * math.sin(theta)
        return mu + sigma * z

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


@dataclass(frozen=True)
class ActivityProfile:
    name: str
    packet_rate: float
    rate_burstiness: float = 1.0
    burst_rate_hz: float = 0.0
    burst_len_s: float = 1.0
    size_mean: float = 500.0
    size_std: float = 100.0
    downlink_fraction: float = 0.5

    def validate(self) -> None:
        ok = (self.packet_rate > 0 and MIN_FRAME <= self.size_mean <= MAX_FRAME and self.size_std >= 0
              and self.rate_burstiness > 0 and self.burst_rate_hz >= 0 and self.burst_len_s > 0
              and 0.0 <= self.downlink_fraction <= 1.0)
        if not ok:
            raise VrsniffError("BAD_PROFILE", f"invalid activity profile {self!r}")


@dataclass(frozen=True)
class AppProfile:
    """An application: activity signatures plus the order they are performed in.

    ``base_rate_offset`` is relative (rate × (1 + offset)); ``base_size_offset``
    is in bytes and shifts every activity's mean frame size.
    """

    name: str
    activities: dict[str, ActivityProfile]
    session_script: tuple[tuple[str, float], ...]
    base_rate_offset: float = 0.0
    base_size_offset: float = 0.0
    server_ip: str = "157.240.22.35"

    def validate(self) -> None:
        if len(self.activities) < 2 or NO_ACTIVITY not in self.activities:
            raise VrsniffError("BAD_PROFILE", f"{self.name}: needs >= 2 activities including {NO_ACTIVITY!r}")
        if self.base_rate_offset <= -1:
            raise VrsniffError("BAD_PROFILE", f"{self.name}: rate offset must exceed -1")
        if not self.session_script:
            raise VrsniffError("BAD_PROFILE", f"{self.name}: empty session script")
        for act, dur in self.session_script:
            if act not in self.activities or not dur > 0:
                raise VrsniffError("BAD_PROFILE", f"{self.name}: bad script step ({act!r}, {dur})")
        for prof in self.activities.values():
            prof.validate()
            if not MIN_FRAME <= self.effective(prof).size_mean <= MAX_FRAME:
                raise VrsniffError("BAD_PROFILE", f"{self.name}: size offset pushes {prof.name} out of range")

    def effective(self, prof: ActivityProfile) -> ActivityProfile:
        return ActivityProfile(prof.name, prof.packet_rate * (1.0 + self.base_rate_offset), prof.rate_burstiness,
                               prof.burst_rate_hz, prof.burst_len_s, prof.size_mean + self.base_size_offset,
                               prof.size_std, prof.downlink_fraction)

    @property
    def script_length_s(self) -> float:
        return sum(d for _, d in self.session_script)


# Shared activity vocabulary. Activities differ jointly in rate, burstiness and
# frame size so that no single feature separates them.
VOCABULARY: dict[str, ActivityProfile] = {p.name: p for p in (
    ActivityProfile(NO_ACTIVITY, 6.0, 10.0, 0.4, 2.0, 300.0, 220.0, 0.5),
    ActivityProfile("Paused", 14.0, 1.5, 0.1, 1.0, 200.0, 25.0, 0.65),
    ActivityProfile("Talking", 50.0, 1.3, 0.3, 2.0, 230.0, 35.0, 0.5),
    ActivityProfile("Walking", 85.0, 1.6, 0.5, 1.0, 330.0, 90.0, 0.55),
    ActivityProfile("Throwing", 60.0, 3.5, 0.4, 0.8, 420.0, 160.0, 0.5),
    ActivityProfile("Making A Fist", 160.0, 2.0, 0.5, 1.5, 900.0, 180.0, 0.6),
    ActivityProfile("Flying", 115.0, 1.2, 0.2, 2.0, 620.0, 60.0, 0.7),
    ActivityProfile("Drawing", 35.0, 2.5, 0.6, 0.6, 520.0, 240.0, 0.45),
    ActivityProfile("Shooting", 95.0, 4.0, 0.8, 0.4, 270.0, 70.0, 0.5),
    ActivityProfile("Moving", 70.0, 1.4, 0.3, 1.5, 760.0, 110.0, 0.6),
)}

PRESETS = {"separable": 0.0, "overlapping": 1.0}

# half-widths of the app offset grid at overlap 0
RATE_SPREAD = 0.6
SIZE_SPREAD = 120.0


def _emit(rng: XorShift64Star, prof: ActivityProfile, start_s: float, end_s: float, out: list,
          server_ip: str) -> None:
    t = start_s
    while t < end_s:
        if prof.burst_rate_hz > 0:
            burst_at = t + rng.expovariate(prof.burst_rate_hz)
        else:
            burst_at = math.inf
        segments = [(t, min(burst_at, end_s), prof.packet_rate)]
        if burst_at < end_s:
            segments.append((burst_at, min(burst_at + prof.burst_len_s, end_s),
                             prof.packet_rate * prof.rate_burstiness))
        for seg_start, seg_end, rate in segments:
            a = seg_start + rng.expovariate(rate)
            while a < seg_end:
                size = int(round(rng.normal(prof.size_mean, prof.size_std)))
                size = min(max(size, MIN_FRAME), MAX_FRAME)
                downlink = rng.random() < prof.downlink_fraction
                transport = Transport.UDP if rng.random() < 0.85 else Transport.TCP
                out.append((a, size, downlink, transport, server_ip))
                a += rng.expovariate(rate)
        t = segments[-1][1]


def _record(t_us: int, size: int, downlink: bool, transport: Transport, remote_ip: str,
            mac: str = HEADSET_MAC, ip: str = HEADSET_IP) -> PacketRecord:
    if downlink:
        return PacketRecord(t_us, size, GATEWAY_MAC, mac, remote_ip, ip, transport)
    return PacketRecord(t_us, size, mac, GATEWAY_MAC, ip, remote_ip, transport)


def _dns_record(t_us: int, name: str) -> PacketRecord:
    size = 14 + 20 + 8 + 12 + sum(len(p) + 1 for p in name.split(".")) + 1 + 4
    return PacketRecord(t_us, max(size, MIN_FRAME), HEADSET_MAC, GATEWAY_MAC, HEADSET_IP, GATEWAY_IP,
                        Transport.UDP, dns_query=name)


def generate_trace(app: AppProfile, seed: int, total_s: float | None = None,
                   bystander_rate: float = 0.0) -> Trace:
    """Generate one labelled capture of ``app`` following its session script.

    The script is cycled (and the last step cut short) to fill ``total_s``.
    Ground-truth intervals tile ``[epoch, epoch + total_s)`` exactly. With
    ``bystander_rate > 0`` a second, non-VR device adds background traffic
    from an independent random stream.
    """
    app.validate()
    total_s = app.script_length_s if total_s is None else float(total_s)
    if not total_s > 0:
        raise VrsniffError("BAD_PROFILE", "total_s must be positive")
    rng = XorShift64Star(seed)
    epoch_us = TRACE_EPOCH_S * US_PER_S

    plan: list[tuple[str, float, float]] = []
    t = 0.0
    while t < total_s:
        for act, dur in app.session_script:
            end = min(t + dur, total_s)
            plan.append((act, t, end))
            t = end
            if t >= total_s:
                break

    raw: list = []
    intervals: list[ActivityInterval] = []
    for act, start, end in plan:
        start_us, end_us = epoch_us + round(start * US_PER_S), epoch_us + round(end * US_PER_S)
        if intervals and intervals[-1].label == act:
            intervals[-1] = ActivityInterval(intervals[-1].start_us, end_us, act)
        else:
            intervals.append(ActivityInterval(start_us, end_us, act))
        _emit(rng, app.effective(app.activities[act]), start, end, raw, app.server_ip)

    records = [_dns_record(epoch_us + 1000, "graph.oculus.com"),
               _dns_record(epoch_us + 2500, "cdp.cloud.unity3d.com")]
    records += [_record(epoch_us + int(a * US_PER_S), size, dl, tr, ip) for a, size, dl, tr, ip in raw]
    if bystander_rate > 0:
        brng = XorShift64Star(seed ^ 0x5EED_B157)
        bprof = ActivityProfile("bystander", bystander_rate, 1.0, 0.0, 1.0, 600.0, 450.0, 0.6)
        braw: list = []
        _emit(brng, bprof, 0.0, total_s, braw, "142.250.64.78")
        records += [_record(epoch_us + int(a * US_PER_S), size, dl, tr, ip, BYSTANDER_MAC, BYSTANDER_IP)
                    for a, size, dl, tr, ip in braw]
    records.sort(key=lambda r: r.timestamp)
    return Trace(tuple(records), app.name, tuple(intervals))


def random_script(rng: XorShift64Star, activities: Sequence[str], total_s: float,
                  min_block_s: int = 20, max_block_s: int = 60) -> tuple[tuple[str, float], ...]:
    """Blocks of whole-second random length, cycling a reshuffled activity order."""
    steps: list[tuple[str, float]] = []
    t = 0.0
    order: list[str] = []
    while t < total_s:
        if not order:
            order = list(activities)
            rng.shuffle(order)
            if steps and order[0] == steps[-1][0] and len(order) > 1:
                order.append(order.pop(0))
        act = order.pop(0)
        dur = float(min_block_s + rng.below(max_block_s - min_block_s + 1))
        dur = min(dur, total_s - t)
        steps.append((act, dur))
        t += dur
    return tuple(steps)


def make_app_profiles(n_apps: int = 10, seed: int = 7, overlap: float = 0.0, session_s: float = 600.0,
                      activities_per_app: tuple[int, int] = (3, 5)) -> list[AppProfile]:
    """Draw ``n_apps`` applications with controlled signature separation.

    Rate and size offsets sit on a seeded grid whose spacing shrinks by
    ``1 - overlap``: 0 keeps apps well apart, 1 collapses every app onto the
    same offsets so only the activity mix distinguishes them.
    """
    if n_apps < 2 or not 0.0 <= overlap <= 1.0:
        raise VrsniffError("BAD_CONFIG", f"need n_apps >= 2 and overlap in [0, 1] (got {n_apps}, {overlap})")
    lo, hi = activities_per_app
    others = [n for n in VOCABULARY if n != NO_ACTIVITY]
    if not 2 <= lo <= hi <= len(others) + 1:
        raise VrsniffError("BAD_CONFIG", f"activities_per_app {activities_per_app} out of range")
    rng = XorShift64Star(seed)
    n_rate = math.ceil(math.sqrt(n_apps))
    n_size = math.ceil(n_apps / n_rate)
    cells = [(i, j) for i in range(n_rate) for j in range(n_size)]
    rng.shuffle(cells)
    spread = 1.0 - overlap
    apps = []
    for k in range(n_apps):
        i, j = cells[k]
        rate_off = spread * RATE_SPREAD * (-1.0 + 2.0 * i / max(n_rate - 1, 1))
        size_off = spread * SIZE_SPREAD * (-1.0 + 2.0 * j / max(n_size - 1, 1))
        n_act = lo + rng.below(hi - lo + 1)
        pool = list(others)
        rng.shuffle(pool)
        names = [NO_ACTIVITY] + sorted(pool[:n_act - 1])
        acts = {n: VOCABULARY[n] for n in names}
        script = random_script(rng, names, session_s)
        ip = f"157.240.{rng.below(250) + 1}.{rng.below(250) + 1}"
        apps.append(AppProfile(f"app-{k:02d}", acts, script, rate_off, size_off, ip))
    return apps


def generate_corpus(n_apps: int = 10, seed: int = 7, overlap: float = 0.0, session_s: float = 600.0,
                    activities_per_app: tuple[int, int] = (3, 5), bystander_rate: float = 0.0) -> list[Trace]:
    """One labelled session trace per generated application."""
    profiles = make_app_profiles(n_apps, seed, overlap, session_s, activities_per_app)
    return [generate_trace(p, seed * 1000 + k + 1, session_s, bystander_rate) for k, p in enumerate(profiles)]


# --------------------------------------------------------------------------
# profile files
# --------------------------------------------------------------------------

def profiles_to_json(apps: Sequence[AppProfile]) -> dict:
    return {"apps": [{
        "name": a.name,
        "offsets": {"rate": a.base_rate_offset, "size": a.base_size_offset},
        "server_ip": a.server_ip,
        "activities": {n: {k: v for k, v in asdict(p).items() if k != "name"} for n, p in a.activities.items()},
        "script": [[act, dur] for act, dur in a.session_script],
    } for a in apps]}


def profiles_from_json(doc: dict) -> list[AppProfile]:
    try:
        apps = []
        for spec in doc["apps"]:
            acts = {n: ActivityProfile(n, **params) for n, params in spec["activities"].items()}
            offsets = spec.get("offsets", {})
            app = AppProfile(spec["name"], acts, tuple((a, float(d)) for a, d in spec["script"]),
                             float(offsets.get("rate", 0.0)), float(offsets.get("size", 0.0)),
                             spec.get("server_ip", "157.240.22.35"))
            app.validate()
            apps.append(app)
    except (KeyError, TypeError, ValueError) as exc:
        raise VrsniffError("BAD_PROFILE", f"malformed profile document: {exc}") from None
    return apps


def load_profiles(path: str | Path) -> list[AppProfile]:
    return profiles_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
