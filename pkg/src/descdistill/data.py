"""Patch datasets: UBC-layout ingestion, synthetic generation and Siamese batches.

UBC directory layout: ``patchesNNNN.bmp`` grayscale bitmaps of 1024x1024
pixels, each a 16x16 grid of 64x64 patches in row-major order, plus
``info.txt`` with one ``pointID refID`` line per patch. Patch ``k`` lives in
image ``k // 256`` at grid cell ``k % 256``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

PATCH_SIZE = 64
NET_SIZE = 32
GRID = 16
GRID_IMAGE = PATCH_SIZE * GRID
PER_IMAGE = GRID * GRID


class DatasetError(Exception):
    pass


class MissingInfoError(DatasetError):
    pass


class MalformedDatasetError(DatasetError):
    pass


class IndexOverflowError(DatasetError):
    pass


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bilinear weights, half-pixel aligned."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    a = np.zeros((n_out, n_in))
    a[np.arange(n_out), lo] += 1 - frac
    a[np.arange(n_out), hi] += frac
    return a


def resample(patches: np.ndarray, size: int = NET_SIZE) -> np.ndarray:
    """Bilinear resize of ``(..., H, W)`` patches to ``size x size`` (float64)."""
    h, w = patches.shape[-2:]
    x = patches.astype(np.float64)
    if (h, w) == (size, size):
        return x
    ah = _bilinear_matrix(h, size)
    aw = _bilinear_matrix(w, size)
    return ah @ x @ aw.T


@dataclass(frozen=True)
class PatchStore:
    """Immutable set of labelled grayscale patches (stored at 64x64, uint8)."""

    patches: np.ndarray
    point_ids: np.ndarray
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.patches.ndim != 3 or len(self.patches) != len(self.point_ids):
            raise MalformedDatasetError(
                f"{len(self.point_ids)} labels for patch array of shape {self.patches.shape}")

    def __len__(self) -> int:
        return len(self.point_ids)

    @cached_property
    def net_patches(self) -> np.ndarray:
        """Network-resolution copies, ``(M, 32, 32)`` float32."""
        return resample(self.patches, NET_SIZE).astype(np.float32)

    @cached_property
    def groups(self) -> dict[int, np.ndarray]:
        order = np.argsort(self.point_ids, kind="stable")
        ids, starts = np.unique(self.point_ids[order], return_index=True)
        return {int(i): g for i, g in zip(ids, np.split(order, starts[1:]))}

    @property
    def num_points(self) -> int:
        return len(self.groups)

    def pairable_ids(self) -> np.ndarray:
        return np.array(sorted(i for i, g in self.groups.items() if len(g) >= 2), dtype=np.int64)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.patches).tobytes())
        h.update(np.ascontiguousarray(self.point_ids, dtype="<i8").tobytes())
        return h.hexdigest()

    def subset(self, point_ids) -> "PatchStore":
        keep = np.isin(self.point_ids, np.asarray(point_ids))
        return PatchStore(self.patches[keep], self.point_ids[keep], dict(self.source))


def split_points(store: PatchStore, test_points: int, seed: int = 0) -> tuple[PatchStore, PatchStore]:
    """Disjoint (train, test) stores; ``test_points`` point ids held out."""
    ids = np.array(sorted(store.groups))
    if not 0 < test_points < len(ids):
        raise ValueError(f"cannot hold out {test_points} of {len(ids)} points")
    rng = np.random.default_rng(seed)
    test = np.sort(rng.choice(ids, test_points, replace=False))
    train = np.setdiff1d(ids, test)
    return store.subset(train), store.subset(test)


# -------------------------------------------------------------------- UBC


def load_ubc(directory) -> PatchStore:
    d = Path(directory)
    info = d / "info.txt"
    if not info.is_file():
        raise MissingInfoError(f"{d}: no info.txt")
    lines = [ln.split() for ln in info.read_text().splitlines() if ln.strip()]
    try:
        point_ids = np.array([int(ln[0]) for ln in lines], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise MalformedDatasetError(f"{info}: unparseable line") from exc
    images = sorted(d.glob("patches*.bmp"))
    if not images:
        raise MalformedDatasetError(f"{d}: no patches*.bmp grid images")
    capacity = PER_IMAGE * len(images)
    n = len(point_ids)
    if n > capacity:
        raise IndexOverflowError(f"{info}: {n} patches listed but grids hold only {capacity}")
    if n <= capacity - PER_IMAGE:
        raise MalformedDatasetError(f"{info}: {n} info lines for {len(images)} grid images")
    patches = np.empty((n, PATCH_SIZE, PATCH_SIZE), dtype=np.uint8)
    for k, path in enumerate(images):
        img = np.asarray(Image.open(path).convert("L"))
        if img.shape != (GRID_IMAGE, GRID_IMAGE):
            raise MalformedDatasetError(f"{path}: grid image is {img.shape}, expected {GRID_IMAGE}x{GRID_IMAGE}")
        cells = img.reshape(GRID, PATCH_SIZE, GRID, PATCH_SIZE).transpose(0, 2, 1, 3).reshape(-1, PATCH_SIZE, PATCH_SIZE)
        lo = k * PER_IMAGE
        take = min(PER_IMAGE, n - lo)
        patches[lo:lo + take] = cells[:take]
    return PatchStore(patches, point_ids, {"kind": "ubc", "path": str(d)})


def save_ubc(store: PatchStore, directory) -> None:
    """Write ``store`` in the UBC grid layout (unused cells are black)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n = len(store)
    for k in range(max(1, -(-n // PER_IMAGE))):
        cells = np.zeros((PER_IMAGE, PATCH_SIZE, PATCH_SIZE), dtype=np.uint8)
        chunk = store.patches[k * PER_IMAGE:(k + 1) * PER_IMAGE]
        if chunk.shape[1:] != (PATCH_SIZE, PATCH_SIZE):
            raise MalformedDatasetError(f"UBC layout needs {PATCH_SIZE}x{PATCH_SIZE} patches")
        cells[:len(chunk)] = chunk
        grid = cells.reshape(GRID, GRID, PATCH_SIZE, PATCH_SIZE).transpose(0, 2, 1, 3).reshape(GRID_IMAGE, GRID_IMAGE)
        Image.fromarray(grid, mode="L").save(d / f"patches{k:04d}.bmp")
    with open(d / "info.txt", "w") as f:
        for pid in store.point_ids:
            f.write(f"{int(pid)} 0\n")


def load_pair_list(path, store: PatchStore) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a UBC ``m50`` pair file: ``patch1 point1 _ patch2 point2 _`` per line.

    Returns ``(idx_a, idx_b, is_match)``.
    """
    rows = np.loadtxt(path, dtype=np.int64, ndmin=2)
    if rows.shape[1] < 5:
        raise MalformedDatasetError(f"{path}: expected at least 5 columns")
    a, b = rows[:, 0], rows[:, 3]
    if a.min(initial=0) < 0 or b.min(initial=0) < 0 or max(a.max(initial=0), b.max(initial=0)) >= len(store):
        raise IndexOverflowError(f"{path}: patch index outside store of {len(store)}")
    return a, b, rows[:, 1] == rows[:, 4]


# -------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthConfig:
    max_rotation_deg: float = 20.0
    scale_jitter: float = 0.15
    shear: float = 0.08
    max_shift: float = 3.0
    contrast_jitter: float = 0.25
    brightness_jitter: float = 20.0
    noise_std: float = 10.0


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Band-limited random field with a random dominant scale and orientation bias."""
    white = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    sigma = rng.uniform(0.04, 0.12)
    theta = rng.uniform(0, np.pi)
    aniso = rng.uniform(1.0, 3.0)
    u = fx * np.cos(theta) + fy * np.sin(theta)
    v = -fx * np.sin(theta) + fy * np.cos(theta)
    envelope = np.exp(-0.5 * ((u * aniso) ** 2 + v ** 2) / sigma ** 2)
    field_ = np.fft.irfft2(np.fft.rfft2(white) * envelope, s=(size, size))
    field_ /= field_.std() + 1e-12
    return field_


def _view(base: np.ndarray, rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    ang = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    sc = np.exp(rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))
    sh = rng.uniform(-cfg.shear, cfg.shear)
    c, s = np.cos(ang), np.sin(ang)
    mat = np.array([[c, -s], [s, c]]) @ np.array([[1.0, sh], [0.0, 1.0]]) / sc
    center_in = (np.array(base.shape) - 1) / 2 + rng.uniform(-cfg.max_shift, cfg.max_shift, 2)
    center_out = (np.array([PATCH_SIZE, PATCH_SIZE]) - 1) / 2
    offset = center_in - mat @ center_out
    warped = ndimage.affine_transform(base, mat, offset=offset, output_shape=(PATCH_SIZE, PATCH_SIZE),
                                      order=1, mode="reflect")
    contrast = 1.0 + rng.uniform(-cfg.contrast_jitter, cfg.contrast_jitter)
    img = 128 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter) + 40 * contrast * warped
    img = img + rng.normal(0, cfg.noise_std, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic(num_points: int, patches_per_point: int, seed: int = 0,
                       config: SynthConfig | None = None) -> PatchStore:
    """Procedural store: one texture per 3D point, warped and noised views of it."""
    if num_points < 2:
        raise ValueError("generate_synthetic needs num_points >= 2")
    if patches_per_point < 1:
        raise ValueError("generate_synthetic needs patches_per_point >= 1")
    cfg = config or SynthConfig()
    canvas = PATCH_SIZE + 32
    patches = np.empty((num_points * patches_per_point, PATCH_SIZE, PATCH_SIZE), dtype=np.uint8)
    seeds = np.random.SeedSequence(seed).spawn(num_points)
    for p, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        base = _texture(rng, canvas)
        for v in range(patches_per_point):
            patches[p * patches_per_point + v] = _view(base, rng, cfg)
    point_ids = np.repeat(np.arange(num_points, dtype=np.int64), patches_per_point)
    return PatchStore(patches, point_ids, {"kind": "synthetic", "seed": seed,
                                           "points": num_points, "per_point": patches_per_point})


# ---------------------------------------------------------------- batches


@dataclass(frozen=True)
class PatchBatch:
    anchors: np.ndarray          # (N, 1, 32, 32)
    positives: np.ndarray        # (N, 1, 32, 32)
    point_ids: np.ndarray        # (N,) distinct
    anchor_idx: np.ndarray       # store indices
    positive_idx: np.ndarray
    rotations: np.ndarray        # quarter turns applied to both patches of pair i

    def __len__(self) -> int:
        return len(self.point_ids)


def sample_pair_batch(store: PatchStore, n: int, rng: np.random.Generator) -> PatchBatch:
    ids = store.pairable_ids()
    if n > len(ids):
        raise ValueError(f"batch of {n} needs {n} point ids with >= 2 patches; store has {len(ids)}")
    chosen = rng.choice(ids, n, replace=False)
    a_idx = np.empty(n, dtype=np.int64)
    p_idx = np.empty(n, dtype=np.int64)
    groups = store.groups
    for k, pid in enumerate(chosen):
        g = groups[int(pid)]
        i, j = rng.choice(len(g), 2, replace=False)
        a_idx[k], p_idx[k] = g[i], g[j]
    net = store.net_patches
    return PatchBatch(net[a_idx][:, None], net[p_idx][:, None], chosen.astype(np.int64),
                      a_idx, p_idx, np.zeros(n, dtype=np.int64))


def augment_rotate(batch: PatchBatch, fraction: float, rng: np.random.Generator) -> PatchBatch:
    """Rotate both patches of a ``fraction`` of the pairs by the same right angle."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("augment_rotate: fraction must lie in [0, 1]")
    n = len(batch)
    m = int(round(fraction * n))
    if m == 0:
        return batch
    chosen = rng.choice(n, m, replace=False)
    turns = rng.integers(1, 4, m)
    anchors = batch.anchors.copy()
    positives = batch.positives.copy()
    rotations = batch.rotations.copy()
    for i, k in zip(chosen, turns):
        anchors[i] = np.rot90(anchors[i], k, axes=(-2, -1))
        positives[i] = np.rot90(positives[i], k, axes=(-2, -1))
        rotations[i] = (rotations[i] + k) % 4
    return replace(batch, anchors=anchors, positives=positives, rotations=rotations)
