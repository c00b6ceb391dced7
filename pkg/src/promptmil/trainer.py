"""Patch-batched, gradient-retaining training of prompt + MIL head.

One bag is trained in three steps:

1. features ``h`` for all instances, batch by batch, with no graph;
2. the head loss on ``h``; the head is updated and ``g = dL/dh`` kept;
3. each batch is re-encoded with a graph and backpropagated from the
   matching rows of ``g``; the prompt gradient is summed over batches.

Step 3 therefore needs activations for one batch at a time only.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import INFERENCE, RECORDING, Graph, MemMeter, Tensor
from .mil import MILHead, Prediction, TaskSpec, UndefinedAUROC, accuracy, auroc, loss
from .optim import Optimizer, cosine_lr
from .synth import Bag
from .vit import PromptSet, ViT, count_trainable_params, forward_features

PROMPT_MIL = "prompt"
CONVENTIONAL_MIL = "conventional"
FULL_FINE_TUNE = "full"
MODES = (PROMPT_MIL, CONVENTIONAL_MIL, FULL_FINE_TUNE)

FULL_GRAPH = "full_graph"
THREE_STEP = "three_step"


@dataclass
class TrainConfig:
    instance_batch_size: int = 16
    epochs: int = 20
    optimizer: str = "adamw"
    base_lr: float = 5e-3
    weight_decay: float = 1e-2
    eta_min: float = 0.0
    t_max: int = 0  # 0 means "epochs"
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        if self.instance_batch_size < 1:
            raise ValueError("instance_batch_size must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in ("f64", "f32"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def schedule_length(self) -> int:
        return self.t_max or self.epochs

    def lr_at(self, epoch: int) -> float:
        return cosine_lr(epoch, self.base_lr, self.schedule_length, self.eta_min)


@dataclass
class FeatureMatrix:
    h: np.ndarray
    g: np.ndarray | None = None


@dataclass
class RetainedGrad:
    g: np.ndarray
    loss: float
    prediction: Prediction


@dataclass
class Model:
    """Backbone, prompt and head in one of the three training modes."""

    vit: ViT
    prompt: PromptSet | None
    head: MILHead
    task: TaskSpec
    mode: str = PROMPT_MIL

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == PROMPT_MIL and (self.prompt is None or self.prompt.k < 1):
            raise ValueError("prompt mode needs at least one prompt token")
        if self.mode == CONVENTIONAL_MIL and self.prompt is not None and self.prompt.k > 0:
            raise ValueError("conventional MIL runs without prompt tokens")
        self.vit.set_trainable(self.mode == FULL_FINE_TUNE)

    def upstream_params(self) -> dict[str, Tensor]:
        """Trainable tensors that sit in front of ``h`` (prompt, maybe backbone)."""
        out = {}
        if self.prompt is not None and self.prompt.k > 0:
            out["prompt"] = self.prompt.tokens
        if self.vit.trainable:
            out.update({f"backbone.{k}": v for k, v in self.vit.params.items()})
        return out

    def census(self) -> dict:
        return count_trainable_params(self.vit, self.prompt, self.head)

    def state(self) -> dict[str, np.ndarray]:
        st = {f"backbone.{k}": v for k, v in self.vit.state().items()}
        st.update({f"head.{k}": v for k, v in self.head.state().items()})
        if self.prompt is not None:
            st["prompt"] = self.prompt.tokens.data.copy()
        return st

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.vit.load_state({k[9:]: v for k, v in state.items() if k.startswith("backbone.")})
        self.head.load_state({k[5:]: v for k, v in state.items() if k.startswith("head.")})
        if "prompt" in state:
            if self.prompt is None:
                raise ValueError("state has a prompt but the model does not")
            self.prompt.tokens.data = np.array(state["prompt"], dtype=np.float64, copy=True)

    def astype(self, dtype) -> Model:
        tensors = list(self.vit.params.values()) + list(self.head.params.values())
        if self.prompt is not None:
            tensors.append(self.prompt.tokens)
        for t in tensors:
            t.data = t.data.astype(dtype)
        return self


def step1_features(images, model: Model, batch_size: int,
                   meter: MemMeter | None = None) -> FeatureMatrix:
    """Step 1: features for every instance, one batch at a time, without a graph."""
    if len(images) == 0:
        raise ValueError("empty bag")
    h = forward_features(images, model.vit, model.prompt, mode=INFERENCE,
                         batch_size=batch_size, meter=meter)
    return FeatureMatrix(h)


def step2_head_update(h: np.ndarray, y: int, model: Model, optimizer: Optimizer | None,
                      lr: float, meter: MemMeter | None = None) -> RetainedGrad:
    """Step 2: head loss on detached ``h``; update the head, keep ``g = dL/dh``.

    ``g`` is read off the same backward pass that produces the head
    gradients, so it is taken at the pre-update head parameters.
    """
    h_leaf = Tensor(h, requires_grad=True, name="h")
    with Graph(meter=meter) as graph:
        pred = model.head(h_leaf)
        lval = loss(pred, y, model.task)
    head_params = list(model.head.params.values())
    grads = ad.backward(lval, wrt=head_params + [h_leaf])
    assert graph.released
    g = grads[h_leaf]
    if optimizer is not None:
        optimizer.step({k: grads[t] for k, t in model.head.params.items()}, lr)
    return RetainedGrad(g, float(lval.data), pred)


def step3_prompt_update(images, model: Model, g: np.ndarray, optimizer: Optimizer | None,
                        lr: float, batch_size: int, meter: MemMeter | None = None,
                        ) -> dict[str, np.ndarray]:
    """Step 3: recompute each batch with a graph and push ``g`` into the prompt.

    Returns the accumulated upstream gradient (f64), which is applied
    through ``optimizer`` when one is given.
    """
    n = len(images)
    if g.shape[0] != n:
        raise ValueError(f"retained gradient has {g.shape[0]} rows for a bag of {n} instances")
    params = model.upstream_params()
    acc = {k: np.zeros(t.shape, dtype=np.float64) for k, t in params.items()}
    if not params:
        return acc
    wrt = list(params.values())
    for s in range(0, n, batch_size):
        with Graph(meter=meter):
            out = forward_features(images[s:s + batch_size], model.vit, model.prompt,
                                   mode=RECORDING)
        grads = ad.backward_with_seed(out, g[s:s + batch_size], wrt=wrt)
        for k, t in params.items():
            acc[k] += grads[t]
    if optimizer is not None:
        optimizer.step(acc, lr)
    return acc


def full_graph_gradients(images, y: int, model: Model, meter: MemMeter | None = None,
                         batch_size: int | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """End-to-end loss and gradients with one graph over the whole bag.

    Keys are upstream names (``prompt``, ``backbone.*``) and ``head.*``.
    """
    params = model.upstream_params()
    params.update({f"head.{k}": v for k, v in model.head.params.items()})
    with Graph(meter=meter):
        h = forward_features(images, model.vit, model.prompt, mode=RECORDING,
                             batch_size=batch_size)
        lval = loss(model.head(h), y, model.task)
    grads = ad.backward(lval, wrt=list(params.values()))
    return float(lval.data), {k: grads[t] for k, t in params.items()}


def three_step_gradients(images, y: int, model: Model, batch_size: int,
                         meter: MemMeter | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Same quantities as :func:`full_graph_gradients`, via steps 1-3 with no updates."""
    fm = step1_features(images, model, batch_size, meter)
    if meter is not None:
        meter.alloc(fm.h.size)
    head_params = {f"head.{k}": v for k, v in model.head.params.items()}
    h_leaf = Tensor(fm.h, requires_grad=True)
    with Graph(meter=meter):
        lval = loss(model.head(h_leaf), y, model.task)
    grads = ad.backward(lval, wrt=list(head_params.values()) + [h_leaf])
    g = grads[h_leaf]
    if meter is not None:
        meter.alloc(g.size)
    out = {k: grads[t] for k, t in head_params.items()}
    out.update(step3_prompt_update(images, model, g, None, 0.0, batch_size, meter))
    if meter is not None:
        meter.free(fm.h.size + g.size)
    return float(lval.data), out


class Trainer:
    """Runs the three steps bag by bag with separate head/upstream optimizers."""

    def __init__(self, model: Model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.head_opt = Optimizer(model.head.params, cfg.optimizer, cfg.weight_decay)
        self.upstream_opt = Optimizer(model.upstream_params(), cfg.optimizer, cfg.weight_decay)
        self._feature_cache: dict[int, np.ndarray] = {}
        self.head_updates = 0
        self.upstream_updates = 0
        self.meter = MemMeter()

    @property
    def caches_features(self) -> bool:
        # with nothing trainable upstream, h never changes
        return not self.model.upstream_params()

    def features(self, bag: Bag) -> np.ndarray:
        if self.caches_features:
            h = self._feature_cache.get(bag.bag_id)
            if h is None:
                h = step1_features(bag.instances, self.model, self.cfg.instance_batch_size).h
                self._feature_cache[bag.bag_id] = h
            return h
        return step1_features(bag.instances, self.model, self.cfg.instance_batch_size,
                              self.meter).h

    def train_bag(self, bag: Bag, lr: float) -> RetainedGrad:
        bs = self.cfg.instance_batch_size
        h = self.features(bag)
        rg = step2_head_update(h, bag.label, self.model, self.head_opt, lr, self.meter)
        self.head_updates += 1
        if not math.isfinite(rg.loss):
            raise FloatingPointError(f"non-finite loss on bag {bag.bag_id}")
        if not self.caches_features:
            step3_prompt_update(bag.instances, self.model, rg.g, self.upstream_opt, lr, bs,
                                self.meter)
            self.upstream_updates += 1
        return rg

    def train_epoch(self, bags: list[Bag], epoch: int) -> dict:
        if not bags:
            raise ValueError("empty training set")
        frozen = self.model.mode != FULL_FINE_TUNE
        before = self.model.vit.checksum() if frozen else None
        lr = self.cfg.lr_at(epoch)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(bags))
        self.meter.reset()
        t0 = time.perf_counter()
        preds, labels, losses = [], [], []
        for i in order:
            rg = self.train_bag(bags[i], lr)
            preds.append(rg.prediction)
            labels.append(bags[i].label)
            losses.append(rg.loss)
        secs = (time.perf_counter() - t0) / len(bags)
        if frozen:
            assert self.model.vit.checksum() == before, "frozen backbone was modified"
        return _stats(preds, labels, losses, self.model.task) | {
            "epoch": epoch, "split": "train", "lr": lr,
            "peak_act_elems": self.meter.peak_activation_elems, "secs_per_bag": secs,
        }

    def predict(self, bags: list[Bag]) -> tuple[list[Prediction], list[float]]:
        preds, losses = [], []
        for bag in bags:
            h = self.features(bag)
            with Graph(mode=INFERENCE):
                pred = self.model.head(h)
                losses.append(float(loss(pred, bag.label, self.model.task).data))
            preds.append(pred)
        return preds, losses

    def evaluate(self, bags: list[Bag], split: str = "val") -> dict:
        preds, losses = self.predict(bags)
        return _stats(preds, [b.label for b in bags], losses, self.model.task) | {"split": split}


def _stats(preds, labels, losses, task: TaskSpec) -> dict:
    scores = np.array([p.score() for p in preds])
    try:
        auc = auroc(scores, labels, task.num_classes)
    except UndefinedAUROC:
        auc = None
    return {
        "loss": float(np.mean(losses)),
        "accuracy": accuracy(preds, labels),
        "auroc": auc,
        "n_bags": len(preds),
    }


@dataclass
class BenchRow:
    strategy: str
    n_instances: int
    peak_act_elems: int
    secs_per_bag: float
    instance_batch_size: int
    reduction: float | None = None
    extra: dict = field(default_factory=dict)

    def record(self) -> dict:
        rec = asdict(self)
        rec.pop("extra")
        rec.update(self.extra)
        return rec


def bench_strategies(bags: list[Bag], model: Model, batch_size: int,
                     repeats: int = 1) -> list[BenchRow]:
    """Peak saved activations and time per bag for FullGraph vs ThreeStep.

    No parameter is updated. The reduction column on ThreeStep rows is
    ``(full - three_step) / full`` of the peak counts for the same bag.
    """
    rows = []
    for bag in bags:
        results = {}
        for strategy in (FULL_GRAPH, THREE_STEP):
            meter = MemMeter()
            t0 = time.perf_counter()
            for _ in range(repeats):
                if strategy == FULL_GRAPH:
                    _, grads = full_graph_gradients(bag.instances, bag.label, model, meter)
                else:
                    _, grads = three_step_gradients(bag.instances, bag.label, model,
                                                    batch_size, meter)
            secs = (time.perf_counter() - t0) / repeats
            results[strategy] = (meter.peak_activation_elems, secs, grads)
        full_peak = results[FULL_GRAPH][0]
        gf, gt = results[FULL_GRAPH][2], results[THREE_STEP][2]
        grad_err = max((max_rel_err(gt[k], gf[k]) for k in gf), default=0.0)
        for strategy in (FULL_GRAPH, THREE_STEP):
            peak, secs, _ = results[strategy]
            red = None if strategy == FULL_GRAPH else (full_peak - peak) / full_peak
            rows.append(BenchRow(strategy, bag.n, peak, secs, batch_size, red,
                                 {"grad_max_rel_err": grad_err}))
    return rows


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| scaled by the largest reference magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b), initial=0.0)), 1e-300)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale
