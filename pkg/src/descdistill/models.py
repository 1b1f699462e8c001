"""Teacher and student descriptor networks, parameter counting and checkpoints.

Checkpoint byte layout (all integers little-endian)::

    8 bytes   magic  b"DDCKPT\\x00\\x00"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header: format version, network spec, metadata and
              a tensor index [{name, shape, dtype, offset, nbytes}, ...]
    rest      concatenated little-endian tensor payloads (offsets relative
              to the start of this section)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import netcore as nc

CHECKPOINT_MAGIC = b"DDCKPT\x00\x00"
CHECKPOINT_VERSION = 1

TEACHER_DIM = 128
STUDENT_DIM = 64


class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str               # "conv" or "dsc"
    c_in: int
    c_out: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    bias: bool = True
    frn_tlu: bool = True    # FRN + TLU after the layer (all but the last)


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    output_dim: int
    input_size: int = 32

    def to_dict(self) -> dict:
        return {"name": self.name, "output_dim": self.output_dim, "input_size": self.input_size,
                "layers": [asdict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(d["name"], tuple(LayerSpec(**layer) for layer in d["layers"]),
                   int(d["output_dim"]), int(d.get("input_size", 32)))


def teacher_spec() -> NetworkSpec:
    """HyNet/L2-Net style: six 3x3 convs + FRN/TLU, final 8x8 conv, BN, L2."""
    plan = [(1, 32, 1), (32, 32, 1), (32, 64, 2), (64, 64, 1), (64, 128, 2), (128, 128, 1)]
    layers = [LayerSpec("conv", ci, co, 3, s) for ci, co, s in plan]
    layers.append(LayerSpec("conv", 128, TEACHER_DIM, 8, 1, 0, bias=False, frn_tlu=False))
    return NetworkSpec("teacher", tuple(layers), TEACHER_DIM)


def student_spec() -> NetworkSpec:
    """First/last standard conv, four depthwise-separable layers in between."""
    layers = [LayerSpec("conv", 1, 32, 3, 1)]
    plan = [(32, 64, 2), (64, 64, 1), (64, 128, 2), (128, 128, 1)]
    layers += [LayerSpec("dsc", ci, co, 3, s) for ci, co, s in plan]
    layers.append(LayerSpec("conv", 128, STUDENT_DIM, 8, 1, 0, bias=False, frn_tlu=False))
    return NetworkSpec("student", tuple(layers), STUDENT_DIM)


def standardize(patches: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-std per patch over the trailing two axes."""
    x = patches.astype(np.float64)
    mean = x.mean(axis=(-2, -1), keepdims=True)
    std = x.std(axis=(-2, -1), keepdims=True)
    x = x - mean
    return np.divide(x, std, out=np.zeros_like(x), where=std > 1e-8)


class Network:
    """Sequential descriptor network mapping ``(N, 1, S, S)`` patches to ``(N, D)``."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        layers: list[tuple[str, nc.Layer]] = []
        for idx, ls in enumerate(spec.layers):
            if ls.kind == "conv":
                layer = nc.Conv2d(ls.c_in, ls.c_out, ls.kernel, ls.stride, ls.padding,
                                  bias=ls.bias, rng=rng, dtype=dtype)
            elif ls.kind == "dsc":
                layer = nc.DepthwiseSeparableConv(ls.c_in, ls.c_out, ls.kernel, ls.stride,
                                                  bias=ls.bias, rng=rng, dtype=dtype)
            else:
                raise ValueError(f"unknown layer kind {ls.kind!r}")
            block = [("conv", layer)]
            if ls.frn_tlu:
                block += [("frn", nc.FRN(ls.c_out, dtype=dtype)), ("tlu", nc.TLU(ls.c_out, dtype=dtype))]
            layers.append((f"layer{idx}", nc.Sequential(block)))
        layers += [("flatten", nc.Flatten()),
                   ("bn", nc.BatchNorm(spec.output_dim, dtype=dtype)),
                   ("l2", nc.L2Normalize())]
        self.body = nc.Sequential(layers)
        self.body.set_training(False)

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    @property
    def training(self) -> bool:
        return self.body.training

    def train(self) -> "Network":
        self.body.set_training(True)
        return self

    def eval(self) -> "Network":
        self.body.set_training(False)
        return self

    def params(self) -> dict[str, nc.Tensor]:
        return self.body.params()

    def buffers(self) -> dict[str, np.ndarray]:
        return self.body.buffers()

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params().items()}
        out.update(self.buffers())
        return out

    def zero_grad(self) -> None:
        for t in self.params().values():
            t.grad = None

    def forward(self, patches: np.ndarray) -> np.ndarray:
        s = self.spec.input_size
        if patches.ndim == 3:
            patches = patches[:, None]
        if patches.ndim != 4 or patches.shape[1:] != (1, s, s):
            raise ValueError(f"expected patches of shape (N, 1, {s}, {s}), got {patches.shape}")
        x = standardize(patches[:, 0]).astype(self.dtype)[..., None]
        return self.body.forward(x)

    __call__ = forward

    def backward(self, grad: np.ndarray) -> None:
        self.body.backward(grad.astype(self.dtype, copy=False))

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_teacher(seed: int = 0, dtype=np.float32) -> Network:
    return Network(teacher_spec(), seed, dtype)


def build_student(seed: int = 0, dtype=np.float32) -> Network:
    return Network(student_spec(), seed, dtype)


def param_count(net) -> int:
    """Total number of learnable scalars (running statistics excluded)."""
    if net is None:
        return 0
    params = net.params() if hasattr(net, "params") else {}
    return int(sum(t.size for t in params.values()))


def spec_param_count(spec: NetworkSpec) -> int:
    """Learnable scalars implied by a spec, counted from the layer formulas."""
    total = 0
    for ls in spec.layers:
        k2 = ls.kernel * ls.kernel
        if ls.kind == "conv":
            total += k2 * ls.c_in * ls.c_out + (ls.c_out if ls.bias else 0)
        else:
            total += k2 * ls.c_in + ls.c_in * ls.c_out + ((ls.c_in + ls.c_out) if ls.bias else 0)
        if ls.frn_tlu:
            total += 3 * ls.c_out
    return total


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    network: Network
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        save_checkpoint(self.network, self.meta, path)


def save_checkpoint(net: Network, meta: dict, path) -> None:
    index, blobs, offset = [], [], 0
    for name, arr in net.state().items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"version": CHECKPOINT_VERSION, "spec": net.spec.to_dict(), "seed": net.seed,
              "dtype": net.dtype.str, "meta": meta, "tensors": index}
    hb = json.dumps(header, indent=1, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path, expect_spec: NetworkSpec | None = None) -> Checkpoint:
    """Read a checkpoint; ``expect_spec`` enforces the target architecture."""
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:8] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic or too short)")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    if 12 + hlen > len(buf):
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(buf[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: version {header.get('version')}, expected {CHECKPOINT_VERSION}")
    spec = NetworkSpec.from_dict(header["spec"])
    payload = buf[12 + hlen:]
    expected_bytes = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) != expected_bytes:
        raise CorruptCheckpointError(f"{path}: payload has {len(payload)} bytes, index declares {expected_bytes}")

    net = Network(expect_spec or spec, header.get("seed", 0), np.dtype(header.get("dtype", "<f4")))
    state = net.state()
    stored = {t["name"]: t for t in header["tensors"]}
    if set(stored) != set(state):
        missing = sorted(set(state) ^ set(stored))
        raise ShapeMismatchError(f"{path}: tensor names differ from target network: {missing[:4]}")
    for name, target in state.items():
        t = stored[name]
        if tuple(t["shape"]) != target.shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {tuple(t['shape'])}, network expects {target.shape}")
        arr = np.frombuffer(payload, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"])),
                            offset=t["offset"]).reshape(t["shape"])
        target[...] = arr
    return Checkpoint(net, header.get("meta", {}))
