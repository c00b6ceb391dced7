"""MIL aggregation heads, bag losses and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SUBTYPE_BINARY = "subtype_binary"
MULTICLASS = "multiclass"

DSMIL = "dsmil"
GATED_ATTENTION = "gated_attention"
MEAN_POOL = "mean_pool"
HEAD_KINDS = (DSMIL, GATED_ATTENTION, MEAN_POOL)


class UndefinedAUROC(ValueError):
    """AUROC needs both positive and negative examples."""


@dataclass(frozen=True)
class TaskSpec:
    task_kind: str = SUBTYPE_BINARY
    num_classes: int = 2

    def __post_init__(self):
        if self.task_kind not in (SUBTYPE_BINARY, MULTICLASS):
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if self.task_kind == SUBTYPE_BINARY and self.num_classes != 2:
            raise ValueError("subtype_binary tasks have exactly 2 classes")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")

    @property
    def loss_kind(self) -> str:
        return "bce" if self.task_kind == SUBTYPE_BINARY else "ce"

    @property
    def num_logits(self) -> int:
        return 1 if self.task_kind == SUBTYPE_BINARY else self.num_classes


@dataclass
class Prediction:
    bag_logits: Tensor
    critical_instance_index: int | None = None
    attention_weights: np.ndarray | None = None

    @property
    def logits(self) -> np.ndarray:
        return self.bag_logits.data

    @property
    def bag_probs(self) -> np.ndarray:
        z = self.logits
        if z.shape[-1] == 1:
            return 1.0 / (1.0 + np.exp(-z))
        e = np.exp(z - z.max())
        return e / e.sum()

    def predicted_class(self) -> int:
        z = self.logits
        if z.shape[-1] == 1:
            return int(z[0] > 0)
        return int(np.argmax(z))

    def score(self) -> np.ndarray | float:
        """Positive-class logit for binary heads, class probabilities otherwise."""
        z = self.logits
        return float(z[0]) if z.shape[-1] == 1 else self.bag_probs


class MILHead:
    """Bag classifier G(h). Parameters are trainable leaves in ``self.params``."""

    def __init__(self, kind: str, instance_dim: int, task: TaskSpec, seed: int = 0,
                 attn_dim: int = 16):
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")
        self.kind = kind
        self.instance_dim = instance_dim
        self.task = task
        self.attn_dim = attn_dim
        rng = np.random.default_rng(seed)
        d, c, a = instance_dim, task.num_logits, attn_dim

        def lin(fan_in, shape):
            lim = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-lim, lim, size=shape)

        if kind == DSMIL:
            p = {
                "inst.weight": lin(d, (d, c)),
                "inst.bias": lin(d, (c,)),
                "q.weight": lin(d, (d, a)),
                "q.bias": lin(d, (a,)),
                "bag.weight": lin(d, (c, d)),
                "bag.bias": lin(d, (c,)),
            }
        elif kind == GATED_ATTENTION:
            p = {
                "attn_v.weight": lin(d, (d, a)),
                "attn_v.bias": lin(d, (a,)),
                "attn_u.weight": lin(d, (d, a)),
                "attn_u.bias": lin(d, (a,)),
                "attn_w.weight": lin(a, (a, 1)),
                "attn_w.bias": lin(a, (1,)),
                "cls.weight": lin(d, (d, c)),
                "cls.bias": lin(d, (c,)),
            }
        else:
            p = {"cls.weight": lin(d, (d, c)), "cls.bias": lin(d, (c,))}
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ValueError(f"head parameter {k!r} missing or mis-shaped")
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)

    def __call__(self, h) -> Prediction:
        return aggregate(h, self)


def aggregate(h, head: MILHead) -> Prediction:
    h = ad.as_tensor(h)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError(f"expected a nonempty (n, d) feature matrix, got {h.shape}")
    if h.shape[1] != head.instance_dim:
        raise ad.ShapeError(f"feature dim {h.shape[1]} != head instance_dim {head.instance_dim}")
    if head.kind == DSMIL:
        return _dsmil(h, head)
    if head.kind == GATED_ATTENTION:
        return _gated(h, head)
    p = head.params
    z = ad.matmul(h.mean(axis=0, keepdims=True), p["cls.weight"]) + p["cls.bias"]
    return Prediction(z.reshape(-1), attention_weights=np.full(h.shape[0], 1.0 / h.shape[0]))


def _dsmil(h: Tensor, head: MILHead) -> Prediction:
    # stream 1: instance scores; the per-class critical instance is the top scorer
    p = head.params
    scores = ad.matmul(h, p["inst.weight"]) + p["inst.bias"]  # (n, C)
    crit = np.argmax(scores.data, axis=0)  # (C,)
    max_scores = ad.max_(scores, axis=0)  # (C,)
    # stream 2: attention of each instance query against the critical query
    q = ad.matmul(h, p["q.weight"]) + p["q.bias"]  # (n, A)
    q_crit = q[crit]  # (C, A)
    sim = ad.matmul(q, q_crit.T) * (1.0 / np.sqrt(head.attn_dim))  # (n, C)
    attn = ad.softmax(sim, axis=0)
    bag_repr = ad.matmul(attn.T, h)  # (C, d)
    bag_logits = (bag_repr * p["bag.weight"]).sum(axis=1) + p["bag.bias"]
    logits = (max_scores + bag_logits) * 0.5
    if scores.shape[1] == 1:
        top = 0
    else:
        top = int(np.argmax(logits.data))
    return Prediction(logits, critical_instance_index=int(crit[top]),
                      attention_weights=attn.data[:, top].copy())


def _gated(h: Tensor, head: MILHead) -> Prediction:
    p = head.params
    v = ad.tanh(ad.matmul(h, p["attn_v.weight"]) + p["attn_v.bias"])
    u = ad.sigmoid(ad.matmul(h, p["attn_u.weight"]) + p["attn_u.bias"])
    a = ad.matmul(v * u, p["attn_w.weight"]) + p["attn_w.bias"]  # (n, 1)
    attn = ad.softmax(a, axis=0)
    z = ad.matmul(attn.T, h)  # (1, d)
    logits = ad.matmul(z, p["cls.weight"]) + p["cls.bias"]
    return Prediction(logits.reshape(-1), attention_weights=attn.data[:, 0].copy())


def loss(pred: Prediction, y: int, task: TaskSpec) -> Tensor:
    """BCE-with-logits for binary subtype tasks, softmax cross-entropy otherwise."""
    y = int(y)
    if not 0 <= y < task.num_classes:
        raise ValueError(f"label {y} out of range for {task.num_classes} classes")
    z = pred.bag_logits
    if task.loss_kind == "bce":
        if z.shape != (1,):
            raise ad.ShapeError(f"binary task expects a single logit, got {z.shape}")
        # softplus(z) - y*z == -[y log s(z) + (1-y) log(1-s(z))]
        return ad.sum_(ad.softplus(z) - z * float(y))
    if z.shape != (task.num_classes,):
        raise ad.ShapeError(f"expected {task.num_classes} logits, got {z.shape}")
    return ad.logsumexp(z, axis=0) - z[y]


def accuracy(preds: Sequence[Prediction], labels: Sequence[int]) -> float:
    if len(preds) == 0:
        raise ValueError("accuracy of an empty prediction list")
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions vs {len(labels)} labels")
    hits = sum(int(p.predicted_class() == int(y)) for p, y in zip(preds, labels))
    return hits / len(preds)


def binary_auroc(scores, labels) -> float:
    """Mann-Whitney AUROC via midranks: ties between classes count one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUROC("AUROC is undefined when only one class is present")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    # rank-sum counts are integers or half-integers, so this is exact in f64
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc(scores, labels, num_classes: int | None = None) -> float:
    """Binary AUROC for 1-d scores; macro one-vs-rest for (N, C) scores.

    In the multiclass case, classes absent from ``labels`` are skipped.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.ndim == 1:
        classes = np.unique(y)
        if classes.size < 2:
            raise UndefinedAUROC("AUROC is undefined when only one class is present")
        return binary_auroc(s, y == classes.max())
    c = s.shape[1] if num_classes is None else num_classes
    present = [k for k in range(c) if np.any(y == k)]
    if len(present) < 2:
        raise UndefinedAUROC("AUROC is undefined when only one class is present")
    return float(np.mean([binary_auroc(s[:, k], y == k) for k in present]))


def prediction_scores(preds: Sequence[Prediction]) -> np.ndarray:
    return np.array([p.score() for p in preds])
