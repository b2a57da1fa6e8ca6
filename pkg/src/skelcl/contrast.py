"""Contrastive machinery: momentum pair, memory queues, losses, extrapolation.

The loss family is masked-softmax InfoNCE over a positive pair plus a
FIFO queue of past key embeddings.  Intra-stream and inter-stream terms
share one kernel; neighbor mining enlarges the numerator with the most
similar queue entries, and the hard-positive extrapolation replaces a
positive pair with a lower-similarity synthetic pair (guarded so the
pair's similarity never turns negative).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncoderParams
from .errors import (
    BatchTooLarge,
    EmptyQueue,
    IndexOutOfRange,
    QueueTooSmall,
    ShapeMismatch,
)
from .rng import RngStream


class MemoryQueue:
    """FIFO ring of unit-norm negative embeddings, one per stream."""

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.slots = np.zeros((capacity, dim), dtype=dtype)
        self.head = 0
        self.filled = 0

    def push(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch)
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise ShapeMismatch(f"expected (*, {self.dim}) embeddings")
        n = batch.shape[0]
        if n > self.capacity:
            raise BatchTooLarge(f"batch {n} exceeds capacity {self.capacity}")
        norms = np.linalg.norm(batch, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ValueError("queue entries must be unit-norm")
        idx = (self.head + np.arange(n)) % self.capacity
        self.slots[idx] = batch.astype(self.slots.dtype)
        self.head = int((self.head + n) % self.capacity)
        self.filled = min(self.capacity, self.filled + n)

    def contents(self) -> np.ndarray:
        """Stored embeddings, oldest first."""
        if self.filled < self.capacity:
            return self.slots[: self.filled].copy()
        return np.concatenate([self.slots[self.head :], self.slots[: self.head]])


def queue_push(queue: MemoryQueue, batch: np.ndarray) -> MemoryQueue:
    queue.push(batch)
    return queue


class EncoderPair:
    """Gradient-trained query parameters plus momentum-tracked key copy."""

    def __init__(self, query: EncoderParams, momentum: float):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.query = query
        self.key = query.copy()
        self.momentum = momentum


def momentum_update(pair: EncoderPair) -> None:
    """key <- m * key + (1 - m) * query, every named tensor including stats."""
    m = pair.momentum
    for name, q in pair.query.tensors.items():
        k = pair.key.tensors[name]
        if k.shape != q.shape:
            raise ShapeMismatch(f"{name}: key {k.shape} vs query {q.shape}")
        k.data[...] = m * k.data + (1.0 - m) * q.data


# -- losses ----------------------------------------------------------------------


@dataclass(frozen=True)
class PftConfig:
    alpha: float = 2.0
    mu: float = 1.0
    apply_to_inter: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    streams: tuple[str, ...] = ("joint", "bone", "motion")
    nnm_topk: int = 1
    pft: PftConfig = field(default_factory=PftConfig)
    nnm_enabled: bool = False
    pft_enabled: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not self.streams:
            raise ValueError("need at least one stream")


def _as_const(v) -> np.ndarray:
    return v.data if isinstance(v, T.Tensor) else np.asarray(v)


def nnm_intra_loss(zq, zk, queue: MemoryQueue, neighbors, tau: float) -> T.Tensor:
    """InfoNCE with mined queue entries added to the numerator.

    With an empty neighbor set this is exactly the plain queue loss: the
    numerator holds only the positive pair.
    """
    if queue.filled == 0:
        raise EmptyQueue("no negatives stored yet")
    neighbors = tuple(int(i) for i in neighbors)
    if any(i < 0 or i >= queue.filled for i in neighbors):
        raise IndexOutOfRange(f"neighbor ids must lie in [0, {queue.filled})")
    zq = T.as_tensor(zq)
    zk_data = _as_const(zk).astype(zq.dtype)
    contents = queue.contents().astype(zq.dtype)
    pos = T.reshape(T.dot(zq, T.Tensor(zk_data)), (1,))
    negs = T.reshape(
        T.matmul(T.reshape(zq, (1, zq.shape[0])), contents.T), (queue.filled,)
    )
    logits = T.div(T.concat([pos, negs]), tau)
    mask = np.zeros(1 + queue.filled, dtype=bool)
    mask[0] = True
    for i in neighbors:
        mask[i + 1] = True
    return T.softmax_nll(logits, mask)


def intra_loss(zq, zk, queue: MemoryQueue, tau: float) -> T.Tensor:
    """Same-stream InfoNCE: positive pair against the stream's queue."""
    return nnm_intra_loss(zq, zk, queue, (), tau)


def inter_loss(zq_u, zk_v, queue_v: MemoryQueue, tau: float) -> T.Tensor:
    """Cross-stream InfoNCE: query of stream u against key and queue of v."""
    return nnm_intra_loss(zq_u, zk_v, queue_v, (), tau)


def nnm_mine(zq, queue: MemoryQueue, k: int) -> tuple[int, ...]:
    """Indices of the k most similar queue entries; ties pick lower index."""
    if queue.filled < k:
        raise QueueTooSmall(f"queue holds {queue.filled} < k={k}")
    sims = queue.contents() @ _as_const(zq)
    order = np.argsort(-sims, kind="stable")
    return tuple(int(i) for i in order[:k])


# -- hard-positive extrapolation ----------------------------------------------------


def sample_lambda(pft: PftConfig, rng: RngStream) -> float:
    """Draw the extrapolation weight: Beta(alpha, alpha) * mu + 1."""
    return float(rng.generator().beta(pft.alpha, pft.alpha) * pft.mu + 1.0)


def predicted_similarity(s: float, lam: float):
    """Closed form for the raw dot product of the extrapolated pair."""
    return 2.0 * lam * (1.0 - lam) * (1.0 - s) + s


def pft_transform(zq, zk, lam: float):
    """Extrapolate a positive pair away from each other.

    Returns (zq_hat, zk_hat, applied).  The originals come back with
    applied=False whenever the pair's similarity is already negative or
    the predicted post-transform similarity would turn negative.
    Gradient flows through the query-side extrapolation only; the key
    side stays constant.
    """
    if lam < 1.0:
        raise ValueError("extrapolation weight must be >= 1")
    zq = T.as_tensor(zq)
    zk_data = _as_const(zk).astype(zq.dtype)
    s = float(zq.data @ zk_data)
    applied = s >= 0.0 and predicted_similarity(s, lam) >= 0.0
    T.record_kink(np.array([applied]))
    if not applied:
        return zq, zk_data, False
    mixed_q = T.add(T.mul(zq, lam), T.Tensor((1.0 - lam) * zk_data))
    zq_hat = T.l2_normalize(mixed_q)
    mixed_k = lam * zk_data + (1.0 - lam) * zq.data
    zk_hat = mixed_k / np.linalg.norm(mixed_k)
    return zq_hat, zk_hat, True


@dataclass
class HistogramTable:
    """Aligned before/after similarity histograms over [-1, 1]."""

    edges: np.ndarray
    before_counts: np.ndarray
    after_counts: np.ndarray
    before_stats: dict[str, float]
    after_stats: dict[str, float]

    def rows(self):
        for i in range(len(self.before_counts)):
            yield (
                float(self.edges[i]),
                float(self.edges[i + 1]),
                int(self.before_counts[i]),
                int(self.after_counts[i]),
            )


def similarity_histogram(before, after, bins: int = 20) -> HistogramTable:
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.size == 0 or after.size == 0:
        raise ValueError("need at least one pair")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    b_counts, _ = np.histogram(np.clip(before, -1, 1), edges)
    a_counts, _ = np.histogram(np.clip(after, -1, 1), edges)

    def stats(x):
        return {"mean": float(x.mean()), "var": float(x.var()), "min": float(x.min())}

    return HistogramTable(edges, b_counts, a_counts, stats(before), stats(after))


# -- batched training path -------------------------------------------------------------


@dataclass
class CombineResult:
    total: T.Tensor
    breakdown: dict[str, float]
    pft_applied_rate: float | None = None
    nnm_mean_similarity: float | None = None


def _batched_queue_nll(zq, zk_data, queue, tau, mined=None) -> T.Tensor:
    """Per-row masked InfoNCE for a (B, D) batch; returns (B,) losses."""
    if queue.filled == 0:
        raise EmptyQueue("no negatives stored yet")
    contents = queue.contents().astype(zq.dtype)
    pos = T.sum_(T.mul(zq, T.Tensor(zk_data.astype(zq.dtype))), axis=1, keepdims=True)
    negs = T.matmul(zq, contents.T)
    logits = T.div(T.concat([pos, negs], axis=1), tau)
    mask = np.zeros((zq.shape[0], 1 + queue.filled), dtype=bool)
    mask[:, 0] = True
    if mined is not None:
        rows = np.repeat(np.arange(mined.shape[0]), mined.shape[1])
        mask[rows, mined.reshape(-1) + 1] = True
    return T.masked_softmax_nll_rows(logits, mask)


def _batch_pft(zq, zk_data, pft: PftConfig, rng: RngStream):
    """Vectorized guarded extrapolation; returns (zq_eff, zk_eff, applied)."""
    b = zq.shape[0]
    lam = rng.generator().beta(pft.alpha, pft.alpha, size=b) * pft.mu + 1.0
    lam = lam.astype(zq.dtype)
    s = (zq.data * zk_data).sum(axis=1)
    s_pred = 2.0 * lam * (1.0 - lam) * (1.0 - s) + s
    applied = (s >= 0.0) & (s_pred >= 0.0)
    T.record_kink(applied)
    lam_col = lam[:, None]
    mixed_q = T.add(T.mul(zq, lam_col), T.Tensor((1.0 - lam_col) * zk_data))
    zq_hat = T.l2_normalize(mixed_q)
    zq_eff = T.where(applied[:, None], zq_hat, zq)
    mixed_k = lam_col * zk_data + (1.0 - lam_col) * zq.data
    mixed_k /= np.linalg.norm(mixed_k, axis=1, keepdims=True)
    zk_eff = np.where(applied[:, None], mixed_k, zk_data)
    return zq_eff, zk_eff, applied


def combine_losses(
    stream_embeddings: dict[str, tuple[T.Tensor, np.ndarray]],
    queues: dict[str, MemoryQueue],
    config: LossConfig,
    rng: RngStream | None = None,
) -> CombineResult:
    """Total loss over all intra terms and directed inter terms.

    `stream_embeddings[u] = (zq, zk)` with zq a (B, D) gradient-bearing
    tensor and zk a gradient-free (B, D) array.  With |S| streams the
    result holds |S| intra terms plus |S|(|S|-1) inter terms, reported
    per term in the breakdown.  Mining applies to intra terms only; the
    extrapolation applies to intra pairs and, if configured, to inter
    pairs as well.
    """
    streams = [s for s in config.streams if s in stream_embeddings]
    if set(streams) != set(config.streams):
        missing = set(config.streams) - set(stream_embeddings)
        raise ShapeMismatch(f"missing stream embeddings: {sorted(missing)}")
    if config.pft_enabled and rng is None:
        raise ValueError("pft needs an rng stream for lambda draws")

    terms: list[T.Tensor] = []
    breakdown: dict[str, float] = {}
    applied_flags: list[np.ndarray] = []
    mined_sims: list[np.ndarray] = []

    effective: dict[str, tuple[T.Tensor, np.ndarray]] = {}
    for u in streams:
        zq, zk = stream_embeddings[u]
        zk = _as_const(zk)
        if config.pft_enabled:
            zq_eff, zk_eff, applied = _batch_pft(zq, zk, config.pft, rng.split(f"lambda.{u}"))
            applied_flags.append(applied)
        else:
            zq_eff, zk_eff = zq, zk
        effective[u] = (zq_eff, zk_eff)

    for u in streams:
        zq_eff, zk_eff = effective[u]
        mined = None
        if config.nnm_enabled:
            q = queues[u]
            if q.filled < config.nnm_topk:
                raise QueueTooSmall(f"stream {u}: {q.filled} < {config.nnm_topk}")
            sims = zq_eff.data @ q.contents().astype(zq_eff.dtype).T
            order = np.argsort(-sims, axis=1, kind="stable")
            mined = order[:, : config.nnm_topk]
            T.record_kink(mined)
            mined_sims.append(np.take_along_axis(sims, mined, axis=1).reshape(-1))
        losses = _batched_queue_nll(zq_eff, zk_eff, queues[u], config.temperature, mined)
        term = T.mean_(losses)
        breakdown[f"intra:{u}"] = term.item()
        terms.append(term)

    for u in streams:
        for v in streams:
            if u == v:
                continue
            zq_u, _ = stream_embeddings[u]
            _, zk_v = stream_embeddings[v]
            zk_v = _as_const(zk_v)
            if config.pft_enabled and config.pft.apply_to_inter:
                zq_u, zk_v, applied = _batch_pft(
                    zq_u, zk_v, config.pft, rng.split(f"lambda.{u}->{v}")
                )
                applied_flags.append(applied)
            losses = _batched_queue_nll(zq_u, zk_v, queues[v], config.temperature, None)
            term = T.mean_(losses)
            breakdown[f"inter:{u}->{v}"] = term.item()
            terms.append(term)

    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)

    rate = None
    if config.pft_enabled:
        flags = np.concatenate(applied_flags)
        rate = float(flags.mean()) if flags.size else 0.0
    mined_mean = None
    if config.nnm_enabled and mined_sims:
        mined_mean = float(np.concatenate(mined_sims).mean())
    return CombineResult(total, breakdown, rate, mined_mean)
