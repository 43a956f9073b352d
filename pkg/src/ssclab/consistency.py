"""Spatial (SPAC) and semantic (SEMC) consistency: selectors, memories, regularizers.

Memories are plain float64 arrays and never enter the gradient tape.  The
regularizers compare L2-normalized batch aggregates of *all* positive samples
against the memory rows with an L1 distance; the memories themselves are fed
only by *qualified* positives (label 1 and probability above ``tau``).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import compute_cams
from .tensor import NORM_EPS, ShapeError, Tensor

log = logging.getLogger(__name__)

VARIANTS = ("soft", "hard", "fix")
MEMORY_MAGIC = b"SSCMEM1"


@dataclass
class ConsistencyConfig:
    tau: float = 0.9
    alpha: float = 0.9
    variant: str = "soft"
    th_hard: float = 0.0
    eps: float = NORM_EPS
    lambda1: float = 1.0
    lambda2: float = 0.1
    initial_epoch: int = 4

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.initial_epoch < 0:
            raise ValueError("initial_epoch must be >= 0")


@dataclass
class ConsistencyMemory:
    """Per-attribute spatial (M x H x W) and semantic (M x C) memories."""

    spa: np.ndarray
    sem: np.ndarray
    spa_initialized: np.ndarray
    sem_initialized: np.ndarray
    update_count: np.ndarray
    spa_frozen: bool = False
    audit: list = field(default_factory=list)

    @classmethod
    def zeros(cls, num_attributes, height, width, channels):
        m = num_attributes
        return cls(np.zeros((m, height, width)), np.zeros((m, channels)),
                   np.zeros(m, dtype=bool), np.zeros(m, dtype=bool), np.zeros(m, dtype=np.int64))

    @property
    def initialized(self):
        return self.spa_initialized & self.sem_initialized

    @property
    def shape(self):
        m, h, w = self.spa.shape
        return m, h, w, self.sem.shape[1]

    def copy(self):
        return ConsistencyMemory(self.spa.copy(), self.sem.copy(), self.spa_initialized.copy(),
                                 self.sem_initialized.copy(), self.update_count.copy(),
                                 self.spa_frozen, list(self.audit))

    def save(self, path):
        save_memory(path, self)


@dataclass
class BatchAggregates:
    a_q: np.ndarray
    n_q: np.ndarray
    v_q: np.ndarray
    a_p: Tensor
    n_p: np.ndarray
    v_p: Tensor | None


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _normalize_rows(x, eps):
    flat = x.reshape(x.shape[0], int(np.prod(x.shape[1:])))
    norm = np.sqrt((flat * flat).sum(axis=1, keepdims=True))
    big = norm >= eps
    return np.where(big, flat / np.where(big, norm, 1.0), 0.0).reshape(x.shape)


def binarize(x, threshold=0.0):
    return (np.asarray(x) > threshold).astype(np.float64)


def select_qualified(p, y, tau):
    """Mask of positives whose probability strictly exceeds ``tau``, plus column counts."""
    p, y = _data(p), _data(y)
    mask = (p > tau) & (y == 1)
    return mask, mask.sum(axis=0).astype(np.int64)


def aggregate_cams(cams, mask):
    """Masked per-attribute mean of (b, M, ...) maps.

    Returns ``(means, counts)``; rows with a zero count are all-zero.  A tensor
    input yields a differentiable tensor, an array input a plain array.
    """
    mask = np.asarray(_data(mask), dtype=bool)
    counts = mask.sum(axis=0).astype(np.int64)
    if mask.shape != cams.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match maps {cams.shape[:2]}")
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    extra = (1,) * (cams.ndim - 2)
    if isinstance(cams, Tensor):
        w = mask.astype(cams.dtype)
        sums = T.einsum("bm,bm" + "xyz"[:cams.ndim - 2] + "->m" + "xyz"[:cams.ndim - 2],
                        Tensor(w), cams)
        return sums * Tensor(inv.reshape(-1, *extra).astype(cams.dtype)), counts
    a = np.asarray(cams)
    sums = np.einsum("bm...,bm->m...", a, mask.astype(a.dtype))
    return sums * inv.reshape(-1, *extra), counts


def weighted_gap(features, cams):
    """Attention-weighted global average pooling: V[i, m] = mean_xy A[i, m] F[i]."""
    fd, ad = _data(features), _data(cams)
    if fd.ndim != 4 or ad.ndim != 4 or fd.shape[0] != ad.shape[0] or fd.shape[2:] != ad.shape[2:]:
        raise ShapeError(f"weighted_gap needs matching (b, *, H, W); got {fd.shape}, {ad.shape}")
    hw = fd.shape[2] * fd.shape[3]
    if isinstance(features, Tensor) or isinstance(cams, Tensor):
        v = T.einsum("bmhw,bchw->bmc", T.as_tensor(cams), T.as_tensor(features))
        return v * (1.0 / hw)
    return T.contract("bmhw", "bchw", "bmc", ad, fd) / hw


def update_memory(mem: ConsistencyMemory, a_q, v_q, n_q, cfg: ConsistencyConfig):
    """Momentum update from qualified aggregates; rows with ``n_q == 0`` are untouched."""
    a_q = np.asarray(_data(a_q), dtype=np.float64)
    v_q = np.asarray(_data(v_q), dtype=np.float64) if v_q is not None else None
    n_q = np.asarray(n_q)
    rows = np.flatnonzero(n_q > 0)
    if rows.size == 0:
        return mem
    alpha, eps = cfg.alpha, cfg.eps

    if mem.spa_frozen:
        mem.audit.append(f"ignored spatial update for attributes {rows.tolist()}: memory frozen")
        log.debug(mem.audit[-1])
    else:
        agg = a_q[rows]
        if cfg.variant == "hard":
            agg = binarize(agg, cfg.th_hard)
        flat = agg.reshape(len(rows), -1)
        live = np.sqrt((flat * flat).sum(axis=1)) >= eps
        if not live.all():
            mem.audit.append(f"skipped degenerate spatial aggregates {rows[~live].tolist()}")
            rows, agg = rows[live], agg[live]
        agg = _normalize_rows(agg, eps)
        old = mem.spa[rows]
        init = mem.spa_initialized[rows]
        blended = np.where(init[:, None, None],
                           (1 - alpha) * _normalize_rows(old, eps) + alpha * agg, agg)
        if cfg.variant == "hard":
            blended = _normalize_rows(binarize(blended, cfg.th_hard), eps)
        mem.spa[rows] = blended
        mem.spa_initialized[rows] = True

    rows = np.flatnonzero(n_q > 0)
    if v_q is not None:
        live = np.sqrt((v_q[rows] ** 2).sum(axis=1)) >= eps
        if not live.all():
            mem.audit.append(f"skipped degenerate semantic aggregates {rows[~live].tolist()}")
        rows = rows[live]
        agg = _normalize_rows(v_q[rows], eps)
        init = mem.sem_initialized[rows]
        mem.sem[rows] = np.where(init[:, None],
                                 (1 - alpha) * _normalize_rows(mem.sem[rows], eps) + alpha * agg,
                                 agg)
        mem.sem_initialized[rows] = True
    mem.update_count[np.flatnonzero(n_q > 0)] += 1
    return mem


def _l1_to_memory(agg: Tensor, n_p, rows_mem, initialized, eps):
    n_p = np.asarray(n_p)
    eligible = np.flatnonzero((n_p > 0) & initialized)
    if eligible.size == 0:
        return Tensor(np.zeros((), dtype=agg.dtype))
    flat = T.reshape(agg, (agg.shape[0], -1))
    picked = T.l2_normalize(T.take(flat, eligible), axis=-1, eps=eps)
    target = _normalize_rows(rows_mem[eligible].reshape(eligible.size, -1), eps)
    diff = picked - Tensor(target.astype(agg.dtype))
    return T.reduce(diff, "l1_norm") * (1.0 / eligible.size)


def spac_loss(a_p, n_p, mem: ConsistencyMemory, eps=NORM_EPS):
    """Mean L1 distance between normalized positive-sample CAMs and spatial memory.

    Averaged over attributes that have positives in the batch and an
    initialized memory row; exactly 0 when none qualify.
    """
    return _l1_to_memory(T.as_tensor(a_p), n_p, mem.spa, mem.spa_initialized, eps)


def semc_loss(v_p, n_p, mem: ConsistencyMemory, eps=NORM_EPS):
    """Semantic counterpart of :func:`spac_loss` over ``mem.sem`` rows."""
    return _l1_to_memory(T.as_tensor(v_p), n_p, mem.sem, mem.sem_initialized, eps)


def batch_aggregates(features, cams, probs, labels, cfg: ConsistencyConfig, need_semantic=True,
                     differentiable=True):
    """Qualified (gradient-free) and positive (differentiable) aggregates for one batch."""
    labels = np.asarray(labels)
    q_mask, _ = select_qualified(probs, labels, cfg.tau)
    p_mask = labels == 1
    cams_raw = _data(cams).astype(np.float64)
    a_q, n_q = aggregate_cams(cams_raw, q_mask)
    v_all_raw = weighted_gap(_data(features).astype(np.float64), cams_raw) if need_semantic else None
    v_q = aggregate_cams(v_all_raw, q_mask)[0] if need_semantic else None
    if differentiable:
        a_p, n_p = aggregate_cams(cams, p_mask)
        v_p = aggregate_cams(weighted_gap(features, cams), p_mask)[0] if need_semantic else None
    else:
        a_p, n_p = aggregate_cams(cams_raw, p_mask)
        v_p = aggregate_cams(v_all_raw, p_mask)[0] if need_semantic else None
    return BatchAggregates(a_q, n_q, v_q, a_p, n_p, v_p)


def freeze_from_baseline(model, batches, cfg: ConsistencyConfig, memory=None):
    """Build a frozen spatial memory from one pass of a trained baseline.

    ``model`` is a :class:`~ssclab.nn.Model` or a checkpoint path; ``batches``
    yields ``(images, labels)``.  Each row is the normalized running mean of
    all qualified CAMs; attributes with no qualified sample stay zero and
    uninitialized so they never enter the spatial loss.
    """
    from .nn import Model, model_from_checkpoint

    if not isinstance(model, Model):
        model = model_from_checkpoint(model)
    sums, counts, shape = None, None, None
    with T.no_grad():
        for images, labels in batches:
            fb = model(images)
            cams = compute_cams(fb.features.data.astype(np.float64),
                                model.head.weight.data.astype(np.float64))
            mask, n = select_qualified(fb.probs, labels, cfg.tau)
            part = np.einsum("bmhw,bm->mhw", cams, mask.astype(np.float64))
            if sums is None:
                sums, counts, shape = part, n.copy(), fb.features.shape
            else:
                sums += part
                counts += n
    m, (_, c, h, w) = model.num_attributes, shape
    mem = memory if memory is not None else ConsistencyMemory.zeros(m, h, w, c)
    rows = np.flatnonzero(counts > 0)
    means = sums[rows] / counts[rows, None, None]
    mem.spa[:] = 0.0
    mem.spa[rows] = _normalize_rows(means, cfg.eps)
    mem.spa_initialized[:] = False
    mem.spa_initialized[rows] = True
    mem.spa_frozen = True
    mem.audit.append(f"spatial memory frozen from baseline; {rows.size}/{m} attributes qualified")
    return mem


# -- memory dump -------------------------------------------------------------
# "SSCMEM1", u32 M, H, W, C, f64 spa (M*H*W), f64 sem (M*C), u8 spa flags (M),
# u8 sem flags (M), u8 frozen, u64 update counts (M); all little-endian.

def save_memory(path, mem: ConsistencyMemory):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m, h, w, c = mem.shape
    with open(path, "wb") as fh:
        fh.write(MEMORY_MAGIC)
        fh.write(struct.pack("<4I", m, h, w, c))
        fh.write(np.ascontiguousarray(mem.spa, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(mem.sem, dtype="<f8").tobytes())
        fh.write(mem.spa_initialized.astype(np.uint8).tobytes())
        fh.write(mem.sem_initialized.astype(np.uint8).tobytes())
        fh.write(struct.pack("<B", int(mem.spa_frozen)))
        fh.write(np.ascontiguousarray(mem.update_count, dtype="<u8").tobytes())


def load_memory(path) -> ConsistencyMemory:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"memory dump not found: {path}")
    blob = path.read_bytes()
    if blob[:7] != MEMORY_MAGIC:
        raise ValueError(f"{path}: not an SSCMEM1 memory dump")
    m, h, w, c = struct.unpack_from("<4I", blob, 7)
    pos = 7 + 16
    spa = np.frombuffer(blob, "<f8", m * h * w, pos).reshape(m, h, w).copy()
    pos += 8 * m * h * w
    sem = np.frombuffer(blob, "<f8", m * c, pos).reshape(m, c).copy()
    pos += 8 * m * c
    spa_init = np.frombuffer(blob, np.uint8, m, pos).astype(bool)
    sem_init = np.frombuffer(blob, np.uint8, m, pos + m).astype(bool)
    frozen = bool(blob[pos + 2 * m])
    counts = np.frombuffer(blob, "<u8", m, pos + 2 * m + 1).astype(np.int64)
    return ConsistencyMemory(spa, sem, spa_init, sem_init, counts, frozen)
