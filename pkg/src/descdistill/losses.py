"""Training objectives for descriptor learning and cross-dimensional distillation.

Batches come as an anchor batch and a positive batch with one-to-one
correspondence: row ``i`` of each describes the same 3D point, and every
other cross pair ``(i, j != i)`` is a negative. Distance matrices follow the
same convention, ``dm[i, j] = ||anchor_i - positive_j||``.

Each ``*_grad`` function returns ``(value, gradients...)``; the plain
functions return only the value. Absolute values use ``sign(0) = 0`` as
their subgradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class LossConfig:
    margin: float = 1.0          # triplet margin t
    alpha_b: float = 1.0         # binarization weight in the basic loss
    gamma: float = 1.0           # binary-term weight inside the distillation loss
    beta: float = 2.0            # distillation weight in the student objective
    lambda_r: float = 0.95       # teacher real-distance scale
    lambda_b: float | None = None  # teacher dot-product scale; None -> D_s / D_t
    eps: float = 1e-5            # soft-sign guard

    def __post_init__(self):
        for name in ("margin", "alpha_b", "gamma", "beta", "lambda_r"):
            if getattr(self, name) < 0:
                raise ValueError(f"LossConfig.{name} must be >= 0")
        if self.eps <= 0:
            raise ValueError("LossConfig.eps must be > 0")
        if self.lambda_b is not None and self.lambda_b < 0:
            raise ValueError("LossConfig.lambda_b must be >= 0")

    def resolved_lambda_b(self, student_dim: int, teacher_dim: int) -> float:
        return student_dim / teacher_dim if self.lambda_b is None else self.lambda_b

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(a: np.ndarray, b: np.ndarray, name: str) -> None:
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"{name}: expected two (N, D) arrays of equal shape, got {a.shape} and {b.shape}")


def _need_negatives(n: int, name: str) -> None:
    if n < 2:
        raise ValueError(f"{name}: batch of {n} has no negative pairs (need N >= 2)")


def hard_sign(r: np.ndarray) -> np.ndarray:
    """Binarize to +-1 with ``r <= 0 -> -1``."""
    return np.where(r > 0, 1.0, -1.0).astype(np.result_type(r, np.float32))


# ------------------------------------------------------------- distances


def pairwise_distance_matrix(anchors: np.ndarray, positives: np.ndarray) -> np.ndarray:
    _check_pair(anchors, positives, "pairwise_distance_matrix")
    a = anchors.astype(np.float64)
    b = positives.astype(np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def pairwise_distance_backward(anchors, positives, dm, grad_dm):
    """Gradients of ``sum(grad_dm * dm)`` w.r.t. anchors and positives."""
    a = anchors.astype(np.float64)
    b = positives.astype(np.float64)
    w = np.divide(grad_dm, dm, out=np.zeros_like(dm), where=dm > 0)
    ga = w.sum(axis=1)[:, None] * a - w @ b
    gb = w.sum(axis=0)[:, None] * b - w.T @ a
    return ga, gb


# --------------------------------------------------------- triplet (hard)


def hardest_negatives(dm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per anchor, the (row, col) of the closest negative in ``dm``.

    Candidates are row ``i`` (anchor i vs other positives) and column ``i``
    (other anchors vs positive i). On equal distance the row wins, and within
    a row or column the lowest index wins.
    """
    n = dm.shape[0]
    _need_negatives(n, "hardest_negatives")
    masked = dm + np.diag(np.full(n, np.inf))
    idx = np.arange(n)
    j_row = np.argmin(masked, axis=1)
    j_col = np.argmin(masked, axis=0)
    use_row = masked[idx, j_row] <= masked[j_col, idx]
    rows = np.where(use_row, idx, j_col)
    cols = np.where(use_row, j_row, idx)
    return rows, cols


def triplet_hard_loss_grad(dm: np.ndarray, margin: float = 1.0):
    n = dm.shape[0]
    rows, cols = hardest_negatives(dm)
    idx = np.arange(n)
    terms = margin + dm[idx, idx] - dm[rows, cols]
    active = terms > 0
    g = np.zeros_like(dm, dtype=np.float64)
    g[idx[active], idx[active]] += 1.0
    np.add.at(g, (rows[active], cols[active]), -1.0)
    return float(np.sum(terms[active])), g


def triplet_hard_loss(dm: np.ndarray, margin: float = 1.0) -> float:
    return triplet_hard_loss_grad(dm, margin)[0]


# ---------------------------------------------------------- binarization


def binarization_loss_grad(r: np.ndarray):
    r64 = r.astype(np.float64)
    d = r64.shape[1]
    diff = r64 - hard_sign(r64)
    return float(np.sum(np.abs(diff)) / d), np.sign(diff) / d


def binarization_loss(r: np.ndarray) -> float:
    return binarization_loss_grad(r)[0]


def soft_sign(r: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    if eps <= 0:
        raise ValueError("soft_sign: eps must be > 0")
    return r / (np.abs(r) + eps)


def soft_sign_derivative(r: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    # d/dr r/(|r|+eps) = eps/(|r|+eps)^2, including r == 0
    return eps / (np.abs(r) + eps) ** 2


# ---------------------------------------------------------- distillation


def _negative_mask(n: int) -> np.ndarray:
    return ~np.eye(n, dtype=bool)


def distill_real_grad(dm_teacher: np.ndarray, dm_student: np.ndarray, lambda_r: float = 0.95):
    """Value and gradient w.r.t. the student distance matrix."""
    if dm_teacher.shape != dm_student.shape:
        raise ValueError("distill_real: teacher and student distance matrices differ in shape")
    n = dm_student.shape[0]
    _need_negatives(n, "distill_real")
    mask = _negative_mask(n)
    diff = lambda_r * dm_teacher - dm_student
    value = float(np.sum(np.abs(diff[mask])) / (n - 1))
    g = np.where(mask, -np.sign(diff), 0.0) / (n - 1)
    return value, g


def distill_real(dm_teacher, dm_student, lambda_r: float = 0.95) -> float:
    return distill_real_grad(dm_teacher, dm_student, lambda_r)[0]


def distill_binary_grad(bt_anchor, bt_positive, bs_anchor, bs_positive, lambda_b: float):
    """Value and gradients w.r.t. the student's soft-signed anchor/positive batches.

    The dot-product matrices are scaled independently of the descriptor
    dimension, so teacher and student may differ in D.
    """
    _check_pair(bt_anchor, bt_positive, "distill_binary (teacher)")
    _check_pair(bs_anchor, bs_positive, "distill_binary (student)")
    n = bs_anchor.shape[0]
    if bt_anchor.shape[0] != n:
        raise ValueError("distill_binary: teacher and student batch sizes differ")
    _need_negatives(n, "distill_binary")
    bsa = bs_anchor.astype(np.float64)
    bsp = bs_positive.astype(np.float64)
    gram_t = bt_anchor.astype(np.float64) @ bt_positive.astype(np.float64).T
    gram_s = bsa @ bsp.T
    mask = _negative_mask(n)
    diff = lambda_b * gram_t - gram_s
    value = float(np.sum(np.abs(diff[mask])) / (n - 1))
    gg = np.where(mask, -np.sign(diff), 0.0) / (n - 1)
    return value, gg @ bsp, gg.T @ bsa


def distill_binary(bt_anchor, bt_positive, bs_anchor, bs_positive, lambda_b: float) -> float:
    return distill_binary_grad(bt_anchor, bt_positive, bs_anchor, bs_positive, lambda_b)[0]


def distillation_loss(l_real: float, l_bin: float, gamma: float = 1.0) -> float:
    return l_real + gamma * l_bin


def basic_loss(l_triplet: float, l_binarization: float, alpha_b: float = 1.0) -> float:
    return l_triplet + alpha_b * l_binarization


def train_loss(l_basic: float, l_distillation: float, beta: float = 2.0) -> float:
    return l_basic + beta * l_distillation


# ------------------------------------------------- composite objectives


def basic_objective(anchors: np.ndarray, positives: np.ndarray, cfg: LossConfig):
    """Basic loss over a Siamese batch.

    The binarization term covers both the anchor and the positive batch.
    Returns ``(total, terms, grad_anchors, grad_positives)``.
    """
    dm = pairwise_distance_matrix(anchors, positives)
    lt, g_dm = triplet_hard_loss_grad(dm, cfg.margin)
    ga, gp = pairwise_distance_backward(anchors, positives, dm, g_dm)
    lba, gba = binarization_loss_grad(anchors)
    lbp, gbp = binarization_loss_grad(positives)
    lb = lba + lbp
    ga = ga + cfg.alpha_b * gba
    gp = gp + cfg.alpha_b * gbp
    total = basic_loss(lt, lb, cfg.alpha_b)
    terms = {"triplet": lt, "binarization": lb, "basic": total}
    return total, terms, ga, gp


def student_objective(s_anchors, s_positives, t_anchors, t_positives, cfg: LossConfig):
    """Basic loss plus weighted distillation against frozen teacher descriptors.

    Teacher descriptors enter as constants; only student gradients are
    returned: ``(total, terms, grad_anchors, grad_positives)``.
    """
    total_basic, terms, ga, gp = basic_objective(s_anchors, s_positives, cfg)

    dm_s = pairwise_distance_matrix(s_anchors, s_positives)
    dm_t = pairwise_distance_matrix(t_anchors, t_positives)
    l_real, g_dm = distill_real_grad(dm_t, dm_s, cfg.lambda_r)
    gra, grp = pairwise_distance_backward(s_anchors, s_positives, dm_s, g_dm)

    lam_b = cfg.resolved_lambda_b(s_anchors.shape[1], t_anchors.shape[1])
    sa = s_anchors.astype(np.float64)
    sp = s_positives.astype(np.float64)
    bta = soft_sign(t_anchors.astype(np.float64), cfg.eps)
    btp = soft_sign(t_positives.astype(np.float64), cfg.eps)
    l_bin, gba, gbp = distill_binary_grad(bta, btp, soft_sign(sa, cfg.eps), soft_sign(sp, cfg.eps), lam_b)
    gba = gba * soft_sign_derivative(sa, cfg.eps)
    gbp = gbp * soft_sign_derivative(sp, cfg.eps)

    l_dist = distillation_loss(l_real, l_bin, cfg.gamma)
    total = train_loss(total_basic, l_dist, cfg.beta)
    w_bin = cfg.beta * cfg.gamma
    ga = ga + cfg.beta * gra + w_bin * gba
    gp = gp + cfg.beta * grp + w_bin * gbp
    terms.update({"distill_real": l_real, "distill_binary": l_bin,
                  "distillation": l_dist, "total": total})
    return total, terms, ga, gp
