"""Discrete-event model of centralized multi-robot keyframe exchange.

Robots emit keyframe messages at a fixed rate; a central server stores every
keyframe it receives and checks each arrival against the stored keyframes
of the other robots. A loop is declared when at least ``min_matches``
keypoints are mutual nearest neighbours within Hamming distance ``tau``.

Keyframe wire record (little-endian, no padding)::

    u8     robot_id
    u32    kf_id
    f64    timestamp [s]
    7*f32  pose: x, y, z [m], qw, qx, qy, qz (unit quaternion)
    u16    K keypoint count
    K *   (2*f32 pixel u, v; D/8 bytes packed descriptor, MSB-first)

so a record is ``43 + K * (8 + D/8)`` bytes. The descriptor width is implied
by the record length. Keyframe log files wrap records as
``b"KFLG" u16 version`` followed by ``u32 length + record`` entries.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .descriptor import DescriptorBinary, binarize_hard, describe, hamming_matrix

HEADER = struct.Struct("<BId7fH")
HEADER_SIZE = HEADER.size  # 43
LOG_MAGIC = b"KFLG"
LOG_VERSION = 1
QUAT_TOL = 1e-3


class WireError(Exception):
    pass


class TruncatedMessageError(WireError):
    pass


class BadMagicError(WireError):
    pass


class VersionError(WireError):
    pass


class QuaternionNormError(WireError):
    pass


def keyframe_size(keypoints: int, dim: int) -> int:
    return HEADER_SIZE + keypoints * (8 + dim // 8)


@dataclass
class KeyframeMessage:
    robot_id: int
    kf_id: int
    timestamp: float
    pose: np.ndarray                # (7,) float32
    keypoints: np.ndarray           # (K, 2) float32 pixel coordinates
    descriptors: np.ndarray         # (K, D/8) uint8 packed

    @property
    def dim(self) -> int:
        return 8 * self.descriptors.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, KeyframeMessage):
            return NotImplemented
        return (self.robot_id == other.robot_id and self.kf_id == other.kf_id
                and self.timestamp == other.timestamp
                and np.array_equal(self.pose, other.pose)
                and np.array_equal(self.keypoints, other.keypoints)
                and np.array_equal(self.descriptors, other.descriptors))


def _record_dtype(width: int) -> np.dtype:
    return np.dtype([("uv", "<f4", (2,)), ("desc", "u1", (width,))])


def _check_quat(pose: np.ndarray) -> None:
    n = float(np.linalg.norm(np.asarray(pose[3:7], dtype=np.float64)))
    if abs(n - 1.0) > QUAT_TOL:
        raise QuaternionNormError(f"pose quaternion has norm {n:.6f}")


def encode_keyframe(msg: KeyframeMessage) -> bytes:
    k = len(msg.keypoints)
    if k > 0xFFFF:
        raise ValueError(f"{k} keypoints exceed the u16 count field")
    if msg.descriptors.shape[0] != k:
        raise ValueError("keypoint and descriptor counts differ")
    _check_quat(msg.pose)
    head = HEADER.pack(msg.robot_id, msg.kf_id, msg.timestamp, *map(float, np.asarray(msg.pose, "<f4")), k)
    rec = np.empty(k, dtype=_record_dtype(msg.descriptors.shape[1]))
    rec["uv"] = msg.keypoints
    rec["desc"] = msg.descriptors
    return head + rec.tobytes()


def decode_keyframe(buf: bytes, dim: int | None = None) -> KeyframeMessage:
    if len(buf) < HEADER_SIZE:
        raise TruncatedMessageError(f"{len(buf)} bytes is shorter than the {HEADER_SIZE}-byte header")
    robot_id, kf_id, ts, *pose, k = HEADER.unpack_from(buf)
    body = len(buf) - HEADER_SIZE
    if dim is not None:
        width = dim // 8
        if body != k * (8 + width):
            raise TruncatedMessageError(f"expected {k * (8 + width)} payload bytes, got {body}")
    elif k == 0:
        width = 0
        if body:
            raise TruncatedMessageError("payload bytes present for K = 0")
    else:
        if body % k or body // k <= 8:
            raise TruncatedMessageError(f"{body} payload bytes do not split into {k} keypoint records")
        width = body // k - 8
    pose = np.array(pose, dtype=np.float32)
    _check_quat(pose)
    rec = np.frombuffer(buf, dtype=_record_dtype(width), count=k, offset=HEADER_SIZE)
    return KeyframeMessage(robot_id, kf_id, ts, pose, rec["uv"].copy(), rec["desc"].copy())


def write_keyframe_log(path, records: list[bytes]) -> None:
    with open(path, "wb") as f:
        f.write(LOG_MAGIC + struct.pack("<H", LOG_VERSION))
        for r in records:
            f.write(struct.pack("<I", len(r)) + r)


def read_keyframe_log(path) -> list[KeyframeMessage]:
    buf = Path(path).read_bytes()
    if buf[:4] != LOG_MAGIC:
        raise BadMagicError(f"{path}: not a keyframe log")
    if len(buf) < 6:
        raise TruncatedMessageError(f"{path}: truncated log header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != LOG_VERSION:
        raise VersionError(f"{path}: log version {version}, expected {LOG_VERSION}")
    pos, out = 6, []
    while pos < len(buf):
        if pos + 4 > len(buf):
            raise TruncatedMessageError(f"{path}: truncated record length")
        (n,) = struct.unpack_from("<I", buf, pos)
        if pos + 4 + n > len(buf):
            raise TruncatedMessageError(f"{path}: truncated record")
        out.append(decode_keyframe(buf[pos + 4:pos + 4 + n]))
        pos += 4 + n
    return out


# --------------------------------------------------------------- scenario


@dataclass
class RobotScript:
    robot_id: int
    places: list            # place id per keyframe; None = a place nobody else sees
    start_time: float = 0.0


@dataclass
class DescriptorSource:
    kind: str = "synthetic"         # "synthetic" | "model"
    dim: int = 64
    noise: float = 0.05             # bit-flip probability per observation (synthetic)
    checkpoint: str | None = None   # model source: network checkpoint
    store: str | None = None        # model source: UBC-layout patch directory


@dataclass
class Scenario:
    robots: list[RobotScript]
    rate_hz: float = 7.0
    keypoints: int = 200
    descriptor: DescriptorSource = field(default_factory=DescriptorSource)
    seed: int = 0
    latency: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        robots = [RobotScript(**r) for r in d.pop("robots")]
        desc = DescriptorSource(**d.pop("descriptor", {}))
        return cls(robots=robots, descriptor=desc, **d)

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def scripted_scenario(num_robots: int = 3, keyframes: int = 50, shared_places: int = 10,
                      revisit_prob: float = 0.3, seed: int = 0, **kwargs) -> Scenario:
    """Robots walking private routes that sometimes pass shared places."""
    rng = np.random.default_rng(seed)
    robots = []
    for r in range(num_robots):
        places = [int(rng.integers(shared_places)) if rng.random() < revisit_prob else None
                  for _ in range(keyframes)]
        robots.append(RobotScript(r, places, 0.0))
    return Scenario(robots=robots, seed=seed, **kwargs)


@dataclass
class MatcherConfig:
    tau: int = 16
    min_matches: int = 12


@dataclass(frozen=True, order=True)
class LoopEvent:
    robot_a: int
    kf_a: int
    robot_b: int
    kf_b: int
    match_count: int = field(compare=False)
    declared_time: float = field(compare=False)

    @property
    def key(self) -> tuple[int, int, int, int]:
        return (self.robot_a, self.kf_a, self.robot_b, self.kf_b)


def mutual_matches(a: DescriptorBinary, b: DescriptorBinary, tau: int) -> int:
    """Mutual nearest neighbours with Hamming distance <= tau (ties -> lowest index)."""
    if len(a) == 0 or len(b) == 0:
        return 0
    d = hamming_matrix(a, b)
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)
    idx = np.arange(len(a))
    ok = (nn_ba[nn_ab] == idx) & (d[idx, nn_ab] <= tau)
    return int(np.count_nonzero(ok))


# -------------------------------------------------------------- observers


def _seeded(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(x) for x in key]))


_UNIQUE = 1 << 30


class SyntheticObserver:
    """Noisy copies of a canonical per-place descriptor set."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.width = scenario.descriptor.dim // 8

    def _place(self, key):
        rng = _seeded(self.sc.seed, *key)
        bits = rng.integers(0, 256, (self.sc.keypoints, self.width), dtype=np.uint8)
        uv = rng.uniform([0, 0], [752, 480], (self.sc.keypoints, 2)).astype(np.float32)
        center = rng.uniform(-10, 10, 3)
        return bits, uv, center

    def observe(self, robot_id: int, kf_id: int, place):
        key = (0, place) if place is not None else (_UNIQUE, robot_id, kf_id)
        bits, uv, center = self._place(key)
        rng = _seeded(self.sc.seed, 1, robot_id, kf_id)
        noise = self.sc.descriptor.noise
        if noise > 0:
            flips = np.packbits(rng.random((self.sc.keypoints, 8 * self.width)) < noise, axis=-1)
            bits = bits ^ flips
        return bits, uv, center, rng


class ModelObserver:
    """Descriptors computed by a trained network on patches of a labelled store.

    Each place is a fixed set of ``K`` point ids; a robot observes one of
    their patches chosen per keyframe.
    """

    def __init__(self, scenario: Scenario, net=None, store=None):
        from .data import load_ubc
        from .models import load_checkpoint

        self.sc = scenario
        src = scenario.descriptor
        self.net = net if net is not None else load_checkpoint(src.checkpoint).network
        self.store = store if store is not None else load_ubc(src.store)
        self.ids = np.array(sorted(self.store.groups))
        if len(self.ids) < scenario.keypoints:
            raise ValueError(f"store has {len(self.ids)} points, scenario needs {scenario.keypoints} per keyframe")

    def observe(self, robot_id: int, kf_id: int, place):
        key = (0, place) if place is not None else (_UNIQUE, robot_id, kf_id)
        prng = _seeded(self.sc.seed, *key)
        points = prng.choice(self.ids, self.sc.keypoints, replace=False)
        uv = prng.uniform([0, 0], [752, 480], (self.sc.keypoints, 2)).astype(np.float32)
        center = prng.uniform(-10, 10, 3)
        rng = _seeded(self.sc.seed, 1, robot_id, kf_id)
        groups = self.store.groups
        idx = np.array([groups[int(p)][rng.integers(len(groups[int(p)]))] for p in points])
        desc = describe(self.net, self.store.net_patches[idx])
        return binarize_hard(desc).bits, uv, center, rng


# ------------------------------------------------------------------ runner


@dataclass
class SimReport:
    scenario: Scenario
    matcher: MatcherConfig
    loops: list[LoopEvent]
    ground_truth: list[tuple[int, int, int, int]]
    sent: list[dict]                 # per message: robot_id, kf_id, timestamp, bytes
    received_bytes: int
    precision: float | None
    recall: float | None

    @property
    def sent_bytes(self) -> int:
        return sum(m["bytes"] for m in self.sent)

    def to_json(self) -> str:
        d = {
            "matcher": asdict(self.matcher),
            "scenario": self.scenario.to_dict(),
            "loops": [asdict(e) for e in self.loops],
            "ground_truth_loops": [list(g) for g in self.ground_truth],
            "sent_bytes": self.sent_bytes,
            "received_bytes": self.received_bytes,
            "precision": self.precision,
            "recall": self.recall,
            "bandwidth": bandwidth_report(self).to_dict(),
        }
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    def timeseries_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["robot_id", "kf_id", "timestamp", "bytes", "cumulative_bytes"])
        totals: dict[int, int] = {}
        for m in self.sent:
            totals[m["robot_id"]] = totals.get(m["robot_id"], 0) + m["bytes"]
            w.writerow([m["robot_id"], m["kf_id"], repr(m["timestamp"]), m["bytes"], totals[m["robot_id"]]])
        return out.getvalue()


def ground_truth_loops(scenario: Scenario) -> list[tuple[int, int, int, int]]:
    seen = [(r.robot_id, k, p) for r in scenario.robots for k, p in enumerate(r.places) if p is not None]
    gt = set()
    for i, (ra, ka, pa) in enumerate(seen):
        for rb, kb, pb in seen[i + 1:]:
            if ra != rb and pa == pb:
                gt.add(tuple(sorted([(ra, ka), (rb, kb)])))
    return sorted((a[0], a[1], b[0], b[1]) for a, b in gt)


def run(scenario: Scenario, matcher: MatcherConfig | None = None, observer=None) -> SimReport:
    """Execute the scenario on a global logical clock.

    Events are ordered by time, then robot id, then keyframe id, then phase
    (emission before arrival), so the run is fully deterministic.
    """
    matcher = matcher or MatcherConfig()
    if not scenario.robots or all(len(r.places) == 0 for r in scenario.robots):
        raise ValueError("scenario has no keyframes")
    if scenario.rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    if scenario.descriptor.dim % 8:
        raise ValueError("descriptor dim must be a multiple of 8")
    if observer is None:
        observer = ModelObserver(scenario) if scenario.descriptor.kind == "model" else SyntheticObserver(scenario)

    queue: list = []
    for r in scenario.robots:
        for k in range(len(r.places)):
            t = r.start_time + k / scenario.rate_hz
            heapq.heappush(queue, (t, r.robot_id, k, 0, None))
    places = {r.robot_id: r.places for r in scenario.robots}

    sent: list[dict] = []
    received = 0
    stored: list[tuple[int, int, DescriptorBinary]] = []
    loops: list[LoopEvent] = []
    while queue:
        t, rid, k, phase, payload = heapq.heappop(queue)
        if phase == 0:
            bits, uv, center, rng = observer.observe(rid, k, places[rid][k])
            yaw = rng.uniform(-np.pi, np.pi)
            pos = center + rng.normal(0, 0.1, 3)
            pose = np.array([*pos, np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)], dtype=np.float32)
            msg = KeyframeMessage(rid, k, float(t), pose, uv, bits)
            buf = encode_keyframe(msg)
            sent.append({"robot_id": rid, "kf_id": k, "timestamp": float(t), "bytes": len(buf)})
            heapq.heappush(queue, (t + scenario.latency, rid, k, 1, buf))
        else:
            received += len(payload)
            msg = decode_keyframe(payload, scenario.descriptor.dim)
            desc = DescriptorBinary(scenario.descriptor.dim, msg.descriptors)
            for orid, ok, odesc in stored:
                if orid == rid:
                    continue
                c = mutual_matches(odesc, desc, matcher.tau)
                if c >= matcher.min_matches:
                    (ra, ka), (rb, kb) = sorted([(orid, ok), (rid, k)])
                    loops.append(LoopEvent(ra, ka, rb, kb, c, float(t)))
            stored.append((rid, k, desc))

    gt = ground_truth_loops(scenario)
    gts = set(gt)
    tp = sum(1 for e in loops if e.key in gts)
    precision = tp / len(loops) if loops else None
    recall = tp / len(gt) if gt else None
    return SimReport(scenario, matcher, loops, gt, sent, received, precision, recall)


# -------------------------------------------------------------- bandwidth


@dataclass
class RobotBandwidth:
    robot_id: int
    messages: int
    bytes: int
    duration_s: Fraction
    bytes_per_s: Fraction

    def to_dict(self) -> dict:
        bps = float(self.bytes_per_s)
        return {"robot_id": self.robot_id, "messages": self.messages, "bytes": self.bytes,
                "duration_s": float(self.duration_s), "bytes_per_s": bps,
                "kbit_per_s": bps * 8 / 1000, "kbyte_per_s": bps / 1000}


@dataclass
class BandwidthReport:
    robots: list[RobotBandwidth]

    @property
    def total_bytes_per_s(self) -> Fraction:
        return sum((r.bytes_per_s for r in self.robots), Fraction(0))

    @property
    def mean_bytes_per_s(self) -> Fraction:
        return self.total_bytes_per_s / len(self.robots)

    def to_dict(self) -> dict:
        total = float(self.total_bytes_per_s)
        mean = float(self.mean_bytes_per_s)
        return {"robots": [r.to_dict() for r in self.robots],
                "total_bytes_per_s": total, "total_kbit_per_s": total * 8 / 1000,
                "total_kbyte_per_s": total / 1000,
                "mean_bytes_per_s": mean, "mean_kbit_per_s": mean * 8 / 1000}


def bandwidth_report(report: SimReport) -> BandwidthReport:
    """Per-robot sustained rate: bytes sent over ``keyframes / rate`` seconds."""
    rate = Fraction(report.scenario.rate_hz)
    out = []
    for r in report.scenario.robots:
        msgs = [m for m in report.sent if m["robot_id"] == r.robot_id]
        if not msgs:
            continue
        total = sum(m["bytes"] for m in msgs)
        duration = Fraction(len(msgs)) / rate
        out.append(RobotBandwidth(r.robot_id, len(msgs), total, duration, total / duration))
    return BandwidthReport(out)
