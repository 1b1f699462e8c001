"""Two-stage training: teacher on the basic loss, then a distilled student.

One epoch is ``ceil(P / N)`` sampled batches, where ``P`` is the number of
point ids with at least two patches, so each id is visited about once per
epoch. All randomness comes from one generator seeded with ``cfg.seed``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import netcore as nc
from .data import PatchStore, augment_rotate, sample_pair_batch
from .losses import LossConfig, basic_objective, student_objective
from .models import (Checkpoint, Network, NetworkSpec, build_student, build_teacher,
                     load_checkpoint, save_checkpoint, student_spec, teacher_spec)

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "epoch", "iter", "total", "triplet", "binarization", "basic",
               "distill_real", "distill_binary", "distillation", "grad_norm"]


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: str = "teacher"                 # "teacher" or "student"
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.01
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment_fraction: float = 0.5
    checkpoint_every: int = 0              # epochs; 0 = only the final checkpoint
    checkpoint_dir: str | None = None
    teacher_path: str | None = None
    cache_teacher: bool = True             # reuse frozen-teacher descriptors per (patch, rotation)

    def validate(self) -> None:
        if self.stage not in ("teacher", "student"):
            raise ConfigError(f"stage must be 'teacher' or 'student', got {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not 0 <= self.augment_fraction <= 1:
            raise ConfigError("augment_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(loss=loss, **d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    teacher_digests: list[str] = field(default_factory=list)   # stage 2 only, one per step

    def epoch_means(self, key: str = "total") -> np.ndarray:
        epochs = sorted({r["epoch"] for r in self.records})
        return np.array([np.mean([r[key] for r in self.records if r["epoch"] == e]) for e in epochs])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "") for c in LOG_COLUMNS])


class TeacherCache:
    """Frozen-teacher descriptors for (store index, quarter turns), computed on demand."""

    def __init__(self, teacher: Network, store: PatchStore, enabled: bool = True):
        self.teacher = teacher.eval()
        self.store = store
        self.enabled = enabled
        self._table = np.zeros((len(store), 4, teacher.output_dim), dtype=teacher.dtype)
        self._have = np.zeros((len(store), 4), dtype=bool)

    def __call__(self, idx: np.ndarray, rot: np.ndarray, patches: np.ndarray) -> np.ndarray:
        if not self.enabled:
            return self.teacher.forward(patches)
        missing = ~self._have[idx, rot]
        if missing.any():
            keys = np.unique(idx[missing] * 4 + rot[missing])
            ki, kr = keys // 4, keys % 4
            src = self.store.net_patches[ki]
            rotated = np.stack([np.rot90(p, k) for p, k in zip(src, kr)])[:, None]
            self._table[ki, kr] = self.teacher.forward(rotated)
            self._have[ki, kr] = True
        return self._table[idx, rot]


def _fit(net: Network, store: PatchStore, cfg: TrainConfig, teacher: Network | None = None,
         checkpoint_meta: dict | None = None) -> TrainLog:
    cfg.validate()
    n = cfg.batch_size
    num_ids = len(store.pairable_ids())
    if num_ids < n:
        raise ValueError(f"dataset has {num_ids} pairable point ids, fewer than batch size {n}")
    steps_per_epoch = math.ceil(num_ids / n)
    rng = np.random.default_rng(cfg.seed)
    adam = nc.AdamState(lr=cfg.lr)
    params = net.params()
    cache = None
    teacher_digest = None
    if teacher is not None:
        teacher.eval()
        teacher.zero_grad()
        teacher_digest = teacher.digest()
        cache = TeacherCache(teacher, store, cfg.cache_teacher)
    trainlog = TrainLog()
    t0 = time.perf_counter()
    net.train()
    step = 0
    for epoch in range(cfg.epochs):
        for it in range(steps_per_epoch):
            batch = augment_rotate(sample_pair_batch(store, n, rng), cfg.augment_fraction, rng)
            net.zero_grad()
            out = net.forward(np.concatenate([batch.anchors, batch.positives]))
            ra, rp = out[:n], out[n:]
            if teacher is None:
                total, terms, ga, gp = basic_objective(ra, rp, cfg.loss)
            else:
                ta = cache(batch.anchor_idx, batch.rotations, batch.anchors)
                tp = cache(batch.positive_idx, batch.rotations, batch.positives)
                total, terms, ga, gp = student_objective(ra, rp, ta, tp, cfg.loss)
            net.backward(np.concatenate([ga, gp]))
            grads = {k: t.grad for k, t in params.items()}
            gnorm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            nc.adam_step({k: t.data for k, t in params.items()}, grads, adam)
            if teacher is not None:
                if any(t.grad is not None for t in teacher.params().values()):
                    raise RuntimeError("gradient reached the frozen teacher")
                digest = teacher.digest()
                if digest != teacher_digest:
                    raise RuntimeError(f"frozen teacher parameters changed at step {step + 1}")
                trainlog.teacher_digests.append(digest)
            step += 1
            rec = {"step": step, "epoch": epoch, "iter": it, "total": float(total), "grad_norm": gnorm}
            rec.update({k: float(v) for k, v in terms.items()})
            trainlog.records.append(rec)
        log.info("epoch %d/%d mean loss %.4f", epoch + 1, cfg.epochs,
                 np.mean([r["total"] for r in trainlog.records if r["epoch"] == epoch]))
        if cfg.checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            meta = dict(checkpoint_meta or {}, epoch=epoch + 1)
            save_checkpoint(net, meta, Path(cfg.checkpoint_dir) / f"{cfg.stage}_epoch{epoch + 1:03d}.ckpt")
    net.eval()
    net.zero_grad()
    trainlog.wall_time = time.perf_counter() - t0
    return trainlog


def _meta(cfg: TrainConfig, store: PatchStore, **extra) -> dict:
    return {"stage": cfg.stage, "epochs": cfg.epochs, "seed": cfg.seed,
            "loss": cfg.loss.to_dict(), "train": cfg.to_dict(), "store_digest": store.digest(), **extra}


def train_basic(store: PatchStore, cfg: TrainConfig, spec: NetworkSpec | None = None) -> tuple[Checkpoint, TrainLog]:
    """Train any architecture on the basic loss alone (no teacher)."""
    spec = spec or (teacher_spec() if cfg.stage == "teacher" else student_spec())
    net = Network(spec, cfg.seed)
    meta = _meta(cfg, store, network=spec.name, distilled=False)
    trainlog = _fit(net, store, cfg, checkpoint_meta=meta)
    return Checkpoint(net, dict(meta, epoch=cfg.epochs)), trainlog


def train_teacher(store: PatchStore, cfg: TrainConfig) -> tuple[Checkpoint, TrainLog]:
    if cfg.stage != "teacher":
        raise ConfigError("train_teacher needs cfg.stage == 'teacher'")
    return train_basic(store, cfg, teacher_spec())


def train_student(store: PatchStore, teacher_ckpt, cfg: TrainConfig,
                  spec: NetworkSpec | None = None) -> tuple[Checkpoint, TrainLog]:
    """Train the student on basic + beta * distillation against a frozen teacher.

    ``teacher_ckpt`` may be a ``Checkpoint``, a ``Network`` or a path.
    """
    if cfg.stage != "student":
        raise ConfigError("train_student needs cfg.stage == 'student'")
    if teacher_ckpt is None:
        teacher_ckpt = cfg.teacher_path
    if teacher_ckpt is None:
        raise ConfigError("student stage requires a teacher checkpoint")
    if isinstance(teacher_ckpt, (str, Path)):
        teacher = load_checkpoint(teacher_ckpt).network
    elif isinstance(teacher_ckpt, Checkpoint):
        teacher = teacher_ckpt.network
    else:
        teacher = teacher_ckpt
    spec = spec or student_spec()
    lam_b = cfg.loss.resolved_lambda_b(spec.output_dim, teacher.output_dim)
    if teacher.output_dim < spec.output_dim or not 0 < lam_b <= 1:
        raise ConfigError(f"teacher dim {teacher.output_dim} / student dim {spec.output_dim} "
                          f"incompatible with lambda_b = {lam_b}")
    net = Network(spec, cfg.seed)
    meta = _meta(cfg, store, network=spec.name, distilled=cfg.loss.beta > 0,
                 teacher_digest=teacher.digest(), lambda_b=lam_b)
    trainlog = _fit(net, store, cfg, teacher=teacher, checkpoint_meta=meta)
    return Checkpoint(net, dict(meta, epoch=cfg.epochs)), trainlog


__all__ = ["TrainConfig", "TrainLog", "ConfigError", "TeacherCache", "train_basic",
           "train_teacher", "train_student", "build_teacher", "build_student"]
