"""Inference-side descriptor pipeline: describe, binarize, match, evaluate.

Packed binary descriptors hold ``ceil(D / 8)`` bytes per row; bit 1 means
+1 and bits are MSB-first within each byte.

Descriptor dump layout (little-endian)::

    4 bytes  magic b"DDSC"
    1 byte   version (1)
    1 byte   kind: 0 = real fp32, 1 = packed binary
    2 bytes  reserved (zero)
    4 bytes  uint32 D
    4 bytes  uint32 count
    payload  row-major: count * D fp32, or count * ceil(D/8) bytes
"""

from __future__ import annotations

import csv
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import NET_SIZE, PatchStore, resample
from .losses import hard_sign
from .models import Network, param_count

DUMP_MAGIC = b"DDSC"
DUMP_VERSION = 1


@dataclass(frozen=True)
class DescriptorBinary:
    dim: int
    bits: np.ndarray          # (N, ceil(dim/8)) uint8

    def __len__(self) -> int:
        return self.bits.shape[0]

    def unpack(self) -> np.ndarray:
        return unpack_bits(self.bits, self.dim)

    def __getitem__(self, idx) -> "DescriptorBinary":
        return DescriptorBinary(self.dim, np.atleast_2d(self.bits[idx]))


def pack_signs(signs: np.ndarray) -> np.ndarray:
    """Pack a ``(N, D)`` +-1 array into bytes, MSB first."""
    return np.packbits(np.asarray(signs) > 0, axis=-1, bitorder="big")


def unpack_bits(bits: np.ndarray, dim: int) -> np.ndarray:
    b = np.unpackbits(bits, axis=-1, count=dim, bitorder="big")
    return np.where(b == 1, 1, -1).astype(np.int8)


def binarize_hard(r: np.ndarray) -> DescriptorBinary:
    r = np.atleast_2d(r)
    return DescriptorBinary(r.shape[1], pack_signs(hard_sign(r)))


def _words(bits: np.ndarray) -> np.ndarray:
    """Reinterpret packed rows as uint64 words when the width allows it."""
    if bits.shape[-1] % 8 == 0:
        return np.ascontiguousarray(bits).view(np.uint64)
    return bits


def hamming(a: DescriptorBinary, b: DescriptorBinary) -> np.ndarray | int:
    """Row-wise Hamming distance between equally sized packed batches."""
    if a.dim != b.dim:
        raise ValueError(f"hamming: dimension mismatch {a.dim} vs {b.dim}")
    if a.bits.shape != b.bits.shape:
        raise ValueError(f"hamming: batch shapes differ {a.bits.shape} vs {b.bits.shape}")
    d = np.bitwise_count(np.bitwise_xor(_words(a.bits), _words(b.bits))).sum(axis=-1)
    return int(d[0]) if d.shape == (1,) else d.astype(np.int64)


def hamming_matrix(a: DescriptorBinary, b: DescriptorBinary) -> np.ndarray:
    """All-pairs ``(len(a), len(b))`` Hamming distances on the packed form."""
    if a.dim != b.dim:
        raise ValueError(f"hamming_matrix: dimension mismatch {a.dim} vs {b.dim}")
    wa, wb = _words(a.bits), _words(b.bits)
    x = np.bitwise_xor(wa[:, None, :], wb[None, :, :])
    return np.bitwise_count(x).sum(axis=-1, dtype=np.int64)


def describe(net: Network, patches: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Real-valued descriptors for ``(N, [1,] H, W)`` patches, network in inference mode."""
    if net.training:
        raise ValueError("describe: network must be in inference mode (call .eval())")
    p = np.asarray(patches)
    if p.ndim == 4:
        if p.shape[1] != 1:
            raise ValueError(f"describe: expected single-channel patches, got {p.shape}")
        p = p[:, 0]
    if p.ndim != 3:
        raise ValueError(f"describe: expected (N, H, W) patches, got {p.shape}")
    if p.shape[1:] != (net.spec.input_size,) * 2:
        p = resample(p, net.spec.input_size)
    out = np.empty((len(p), net.output_dim), dtype=net.dtype)
    for lo in range(0, len(p), batch_size):
        out[lo:lo + batch_size] = net.forward(p[lo:lo + batch_size, None])
    return out


# -------------------------------------------------------------- FPR95


def eval_fpr95(pos_distances, neg_distances) -> float:
    """False positive rate at the smallest threshold reaching 95% recall.

    A pair counts as detected when its distance is <= the threshold.
    """
    pos = np.sort(np.asarray(pos_distances, dtype=np.float64).ravel())
    neg = np.asarray(neg_distances, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("eval_fpr95: need non-empty positive and negative distance lists")
    if pos.size < 20:
        raise ValueError(f"eval_fpr95: {pos.size} positives; at least 20 needed for a 95% recall point")
    k = (95 * pos.size + 99) // 100
    threshold = pos[k - 1]
    return float(np.count_nonzero(neg <= threshold) / neg.size)


@dataclass
class MatchResult:
    idx_a: np.ndarray
    idx_b: np.ndarray
    is_match: np.ndarray
    dist_real: np.ndarray
    dist_binary: np.ndarray


@dataclass
class BenchmarkResult:
    pairs: MatchResult
    fpr95_real: float
    fpr95_binary: float

    def rows(self) -> list[dict]:
        return [{"mode": "real", "fpr95": self.fpr95_real, "pairs": len(self.pairs.is_match)},
                {"mode": "binary", "fpr95": self.fpr95_binary, "pairs": len(self.pairs.is_match)}]


def sample_pairs(store: PatchStore, num_pairs: int, seed: int = 0):
    """Balanced matched/unmatched index pairs drawn with a seeded generator."""
    rng = np.random.default_rng(seed)
    ids = store.pairable_ids()
    if len(ids) < 2:
        raise ValueError("sample_pairs: store needs >= 2 point ids with >= 2 patches")
    groups = store.groups
    n_pos = num_pairs // 2
    n_neg = num_pairs - n_pos
    a = np.empty(num_pairs, dtype=np.int64)
    b = np.empty(num_pairs, dtype=np.int64)
    for k, pid in enumerate(rng.choice(ids, n_pos, replace=True)):
        g = groups[int(pid)]
        i, j = rng.choice(len(g), 2, replace=False)
        a[k], b[k] = g[i], g[j]
    all_ids = np.array(sorted(groups))
    for k in range(n_pos, num_pairs):
        p, q = rng.choice(all_ids, 2, replace=False)
        gp, gq = groups[int(p)], groups[int(q)]
        a[k], b[k] = gp[rng.integers(len(gp))], gq[rng.integers(len(gq))]
    return a, b, store.point_ids[a] == store.point_ids[b]


def benchmark_pairs(net: Network, store: PatchStore, num_pairs: int = 2000, seed: int = 0,
                    pairs=None) -> BenchmarkResult:
    """FPR95 on L2 (real) and Hamming (binary) distances over a pair set."""
    a, b, is_match = pairs if pairs is not None else sample_pairs(store, num_pairs, seed)
    used = np.unique(np.concatenate([a, b]))
    desc = describe(net, store.net_patches[used])
    pos_of = np.searchsorted(used, a), np.searchsorted(used, b)
    ra, rb = desc[pos_of[0]].astype(np.float64), desc[pos_of[1]].astype(np.float64)
    d_real = np.linalg.norm(ra - rb, axis=1)
    d_bin = hamming(binarize_hard(ra), binarize_hard(rb)).astype(np.float64)
    result = MatchResult(a, b, is_match, d_real, np.atleast_1d(d_bin))
    return BenchmarkResult(result,
                           eval_fpr95(d_real[is_match], d_real[~is_match]),
                           eval_fpr95(result.dist_binary[is_match], result.dist_binary[~is_match]))


def write_fpr95_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# ------------------------------------------------------------- profiling


def profile(net: Network, num_patches: int = 500, runs: int = 5, seed: int = 0) -> dict:
    """Parameter count and median wall time for describing ``num_patches`` patches."""
    rng = np.random.default_rng(seed)
    patches = rng.uniform(0, 255, size=(num_patches, 1, NET_SIZE, NET_SIZE)).astype(np.float32)
    was_training = net.training
    net.eval()
    describe(net, patches[:32])
    times = []
    for _ in range(max(5, runs)):
        t0 = time.perf_counter()
        describe(net, patches, batch_size=num_patches)
        times.append(time.perf_counter() - t0)
    if was_training:
        net.train()
    return {"network": net.spec.name, "param_count": param_count(net),
            "num_patches": num_patches, "runs": len(times),
            "runtime_ms_median": 1e3 * float(np.median(times)),
            "runtime_ms_all": [1e3 * t for t in times]}


# ------------------------------------------------------------ dump files


def dump_descriptors(path, desc) -> None:
    if isinstance(desc, DescriptorBinary):
        kind, dim, count, payload = 1, desc.dim, len(desc), np.ascontiguousarray(desc.bits).tobytes()
    else:
        arr = np.ascontiguousarray(desc, dtype="<f4")
        kind, dim, count, payload = 0, arr.shape[1], arr.shape[0], arr.tobytes()
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC + struct.pack("<BBHII", DUMP_VERSION, kind, 0, dim, count))
        f.write(payload)


def load_descriptors(path):
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != DUMP_MAGIC:
        raise ValueError(f"{path}: not a descriptor dump")
    version, kind, _, dim, count = struct.unpack_from("<BBHII", buf, 4)
    if version != DUMP_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    body = buf[16:]
    if kind == 0:
        if len(body) != 4 * dim * count:
            raise ValueError(f"{path}: truncated real payload")
        return np.frombuffer(body, dtype="<f4").reshape(count, dim).copy()
    width = -(-dim // 8)
    if len(body) != width * count:
        raise ValueError(f"{path}: truncated binary payload")
    return DescriptorBinary(dim, np.frombuffer(body, dtype=np.uint8).reshape(count, width).copy())
