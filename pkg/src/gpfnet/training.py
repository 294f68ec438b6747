"""Identity + triplet objectives, Adam with decoupled weight decay, and the loop."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, DatasetError, SamplingError, pk_sample_indices
from .model import GpfModel

log = logging.getLogger(__name__)

DIST_EPS = 1e-12


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3.5e-4
    weight_decay: float = 1e-5  # weight matrices
    bias_decay: float = 1e-7  # biases and LayerNorm gamma/beta
    iterations: int = 180
    batch_size: int = 64
    p_identities: int = 16
    k_instances: int = 4
    margin: float = 0.3
    id_weight: float = 1.0
    triplet_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.p_identities * self.k_instances != self.batch_size:
            raise TrainConfigError(
                f"p_identities*k_instances = {self.p_identities}*{self.k_instances} "
                f"!= batch_size {self.batch_size}"
            )
        if self.margin < 0:
            raise TrainConfigError("margin must be >= 0")
        if self.iterations < 1:
            raise TrainConfigError("iterations must be >= 1")
        if self.lr <= 0:
            raise TrainConfigError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[Tensor]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def decay_for(name: str, param: Tensor, config: TrainConfig) -> float:
    return config.weight_decay if param.ndim >= 2 else config.bias_decay


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, b1, b2, shrink, step, c2_inv, eps):  # pragma: no cover - jitted
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] = p[i] * shrink - step * mi / (np.sqrt(vi * c2_inv) + eps)


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray | None],
    state: AdamState,
    lr: float,
    decays: list[float],
) -> AdamState:
    """One in-place Adam update with decoupled weight decay.

    A parameter whose gradient is ``None`` (not reached by the loss) is left
    untouched, decay included.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v, wd in zip(params, grads, state.m, state.v, decays):
        if g is None:
            continue
        _adam_kernel(
            p.data.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
            b1, b2, 1.0 - lr * wd, lr / c1, 1.0 / c2, state.eps,
        )
    return state


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float) -> Tensor:
    """Per-row hinge ``max(0, |a-p| - |a-n| + margin)``; inputs are ``(B, d)``."""
    d_ap = ad.sqrt(ad.sum((anchor - positive) ** 2, axis=-1) + DIST_EPS)
    d_an = ad.sqrt(ad.sum((anchor - negative) ** 2, axis=-1) + DIST_EPS)
    return ad.relu(d_ap - d_an + margin)


def id_loss(logits: Tensor, labels) -> Tensor:
    """Per-row softmax cross-entropy; ``logits`` is ``(B, M)``."""
    labels = np.atleast_1d(np.asarray(labels))
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
    m = logits.shape[-1]
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    if np.any(labels < 0) or np.any(labels >= m):
        raise ValueError(f"labels must lie in [0, {m}), got {labels.tolist()}")
    logp = ad.log_softmax(logits, axis=-1)
    return -logp[np.arange(len(labels)), labels]


def pairwise_distances(features: np.ndarray) -> np.ndarray:
    diff = features[:, None, :] - features[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def batch_hard_mining(features: np.ndarray, labels) -> list[tuple[int, int, int]]:
    """For each anchor: farthest same-label sample and nearest other-label sample.

    Ties resolve to the lowest index. Every label must appear at least twice.
    """
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    lonely = uniq[counts < 2]
    if lonely.size:
        raise SamplingError(f"labels with a single instance in batch: {lonely.tolist()}")
    dist = pairwise_distances(np.asarray(features, dtype=np.float64))
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    triplets = []
    for a in range(len(labels)):
        pos_d = np.where(same[a], dist[a], -np.inf)
        neg_d = np.where(labels != labels[a], dist[a], np.inf)
        if not np.isfinite(neg_d).any():
            raise SamplingError("batch holds a single identity; no negatives to mine")
        triplets.append((a, int(np.argmax(pos_d)), int(np.argmin(neg_d))))
    return triplets


@dataclass
class Batch:
    images: np.ndarray  # (B, img_dim)
    tokens: list[np.ndarray]  # B matrices of shape (n_i, txt_dim)
    labels: np.ndarray  # (B,) ints in [0, M)

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> Batch:
        return cls(dataset.images(), dataset.tokens(), dataset.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> Batch:
        return Batch(self.images[indices], [self.tokens[i] for i in indices], self.labels[indices])


@dataclass
class LossParts:
    total: Tensor
    id: float
    triplet: float


def total_loss(batch: Batch, model: GpfModel, config: TrainConfig) -> LossParts:
    """Mean ID loss plus mean batch-hard triplet loss on normalised ``K_f``."""
    k_f, _ = model.encode(batch.images, batch.tokens)
    ce = ad.mean(id_loss(model.classify(k_f), batch.labels))
    feats = ad.l2_normalize(k_f, axis=-1)
    trip = batch_hard_mining(feats.data, batch.labels)
    a, p, n = (np.array(col) for col in zip(*trip))
    hinge = ad.mean(triplet_loss(feats[a], feats[p], feats[n], config.margin))
    total = ce * config.id_weight + hinge * config.triplet_weight
    return LossParts(total, ce.item(), hinge.item())


def check_trainable(labels, p: int, k: int) -> None:
    counts = Counter(np.asarray(labels).tolist())
    eligible = sum(1 for c in counts.values() if c >= k)
    if eligible < p:
        raise DatasetError(
            f"dataset too small for PK sampling: need {p} identities with >= {k} samples, "
            f"found {eligible} (of {len(counts)} identities)"
        )


@dataclass
class TrainResult:
    model: GpfModel
    history: list[float] = field(default_factory=list)
    steps: int = 0


def train(
    data: Dataset | Batch,
    model: GpfModel,
    config: TrainConfig,
    callback=None,
) -> TrainResult:
    """Run ``config.iterations`` PK-sampled Adam steps on ``model`` (in place).

    Each step: sample a P x K batch, forward, total loss, backward, Adam.
    The run is a pure function of the data, the initial weights and
    ``config.seed``.
    """
    config.validate()
    pool = Batch.from_dataset(data) if isinstance(data, Dataset) else data
    check_trainable(pool.labels, config.p_identities, config.k_instances)
    if pool.labels.max() >= model.config.num_identities:
        raise DatasetError(
            f"label {pool.labels.max()} out of range for {model.config.num_identities} identities"
        )
    rng = np.random.default_rng(config.seed)
    names = list(model.params)
    params = [model.params[n] for n in names]
    decays = [decay_for(n, p, config) for n, p in zip(names, params)]
    state = AdamState.zeros_like(params)
    result = TrainResult(model)
    for step in range(1, config.iterations + 1):
        idx = pk_sample_indices(pool.labels, config.p_identities, config.k_instances, rng)
        batch = pool.subset(idx)
        model.zero_grad()
        parts = total_loss(batch, model, config)
        parts.total.backward()
        adam_step(params, [p.grad for p in params], state, config.lr, decays)
        loss = parts.total.item()
        result.history.append(loss)
        result.steps = step
        log.debug("step %d loss %.6f (id %.6f, triplet %.6f)", step, loss, parts.id, parts.triplet)
        if callback is not None:
            callback(step, parts)
    model.zero_grad()
    return result
