"""Acceptance criteria, one test each; every test records a pass/fail line."""

import itertools
import json
import time

import numpy as np
import pytest

from promptmil import cli
from promptmil.autodiff import INFERENCE, Graph
from promptmil.config import default_config
from promptmil.experiment import run_training
from promptmil.mil import DSMIL, HEAD_KINDS, MILHead, TaskSpec, aggregate, auroc, loss
from promptmil.synth import GenSpec, generate_dataset, make_bag
from promptmil.trainer import (
    CONVENTIONAL_MIL, PROMPT_MIL, Model, TrainConfig, Trainer, bench_strategies,
    full_graph_gradients, max_rel_err, step1_features, step2_head_update, step3_prompt_update,
    three_step_gradients,
)
from promptmil.vit import PromptSet, ViT, ViTConfig, count_trainable_params, forward_features

TOY = ViTConfig(image_size=16, patch_size=8, embed_dim=16, num_layers=2, num_heads=2,
                num_prompts=1)
TASK = TaskSpec()


def toy_model(kind=DSMIL):
    return Model(ViT(TOY, seed=11), PromptSet.init(1, 16, seed=12), MILHead(kind, 16, TASK, seed=13),
                 TASK, PROMPT_MIL)


def toy_bag(n=8, seed=0):
    return np.random.default_rng(seed).random((n, 16, 16, 3))


def test_criterion_01_gradient_retaining_equivalence(criterion):
    t0 = time.perf_counter()
    m = toy_model()
    x = toy_bag()
    # n = 8 in m = 2 batches; no head update happens inside the comparison
    _, gf = full_graph_gradients(x, 1, m)
    _, gt = three_step_gradients(x, 1, m, batch_size=4)
    err = max(max_rel_err(gt[k], gf[k]) for k in gf)
    secs = time.perf_counter() - t0
    ok = err < 1e-10 and secs < 5.0
    criterion(1, ok, f"max rel err {err:.2e} (< 1e-10), {secs:.2f}s (< 5s)")
    assert ok


def test_criterion_02_finite_difference_oracle(criterion):
    t0 = time.perf_counter()
    m = toy_model()
    x = toy_bag(seed=1)
    params = {"prompt": m.prompt.tokens, **{f"head.{k}": t for k, t in m.head.params.items()}}
    _, analytic = full_graph_gradients(x, 1, m)

    def value():
        with Graph(mode=INFERENCE):
            h = forward_features(x, m.vit, m.prompt)
            return float(loss(m.head(h), 1, TASK).data)

    eps = 1e-4
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
        worst = max(worst, max_rel_err(analytic[name].reshape(-1), numeric))
    secs = time.perf_counter() - t0
    ok = worst < 1e-3 and secs < 60.0
    criterion(2, ok, f"max rel err vs central differences {worst:.2e} (< 1e-3), {secs:.1f}s")
    assert ok


def test_criterion_03_batching_invariance(criterion):
    m = toy_model()
    x = toy_bag(seed=2)
    g = step2_head_update(step1_features(x, m, 8).h, 0, m, None, 0.0).g
    grads = {bs: step3_prompt_update(x, m, g, None, 0.0, bs)["prompt"] for bs in (1, 2, 8)}
    err = max(max_rel_err(grads[a], grads[b]) for a, b in itertools.combinations(grads, 2))
    ok = err < 1e-12
    criterion(3, ok, f"pairwise max rel err over batch sizes 1/2/8: {err:.2e} (< 1e-12)")
    assert ok


def test_criterion_04_parameter_census(criterion):
    cfg = ViTConfig(embed_dim=192, num_heads=3, num_layers=1, num_prompts=1)
    vit = ViT(cfg, seed=0)
    head = MILHead(DSMIL, 192, TASK)
    prompt_census = count_trainable_params(vit, PromptSet.init(1, 192), head)
    conv_census = Model(ViT(cfg, seed=0), None, head, TASK, CONVENTIONAL_MIL).census()

    m = toy_model()
    before = m.vit.checksum()
    bags = [make_bag(GenSpec(image_size=16, n_min=4, n_max=6), i % 2, i) for i in range(4)]
    Trainer(m, TrainConfig(instance_batch_size=4, base_lr=1e-2)).train_epoch(bags, 0)
    unchanged = m.vit.checksum() == before
    ok = prompt_census["prompt"] == 192 and conv_census["prompt"] == 0 and unchanged
    criterion(4, ok, f"prompt params {prompt_census['prompt']} (== 192), conventional "
                     f"{conv_census['prompt']} (== 0), backbone unchanged after epoch: {unchanged}")
    assert ok


def test_criterion_05_memory_proxy(criterion):
    t0 = time.perf_counter()
    model = Model(ViT(ViTConfig(), seed=0), PromptSet.init(1, 32), MILHead(DSMIL, 32, TASK),
                  TASK, PROMPT_MIL)
    spec = GenSpec()
    bags = [make_bag(GenSpec(n_min=n, n_max=n), 1, i) for i, n in enumerate((64, 128, 256))]
    assert spec.image_size == 32
    rows = bench_strategies(bags, model, batch_size=8)
    reds = [r.reduction for r in rows if r.reduction is not None]
    secs = time.perf_counter() - t0
    ok = reds[0] >= 0.30 and all(b >= a for a, b in zip(reds, reds[1:])) and secs < 180
    criterion(5, ok, "reduction at n=64/128/256: " + ", ".join(f"{r:.1%}" for r in reds)
              + f" (>= 30%, non-decreasing), {secs:.1f}s")
    assert ok


@pytest.mark.slow
def test_criterion_06_synthetic_task_improvement(criterion):
    t0 = time.perf_counter()
    base = default_config()
    spec = base.data
    assert (spec.num_train, spec.num_val, spec.num_test) == (200, 50, 100)
    assert spec.witness_rate == 0.5
    dataset = generate_dataset(spec)
    acc = {PROMPT_MIL: [], CONVENTIONAL_MIL: []}
    for seed in (0, 1, 2):
        for mode in acc:
            cfg = base.with_mode(mode).with_seed(seed)
            acc[mode].append(run_training(cfg, dataset=dataset)["accuracy"])
    gain = 100 * (np.mean(acc[PROMPT_MIL]) - np.mean(acc[CONVENTIONAL_MIL]))
    secs = time.perf_counter() - t0
    ok = gain >= 5.0 and secs < 900
    criterion(6, ok, f"prompt {acc[PROMPT_MIL]} vs conventional {acc[CONVENTIONAL_MIL]}: "
                     f"gain {gain:+.1f} points (>= +5), {secs:.0f}s (< 900s)")
    assert ok


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_criterion_07_auroc_oracle(criterion):
    rng = np.random.default_rng(7)
    worst, invariant = 0.0, True
    for _ in range(100):
        n = int(rng.integers(4, 40))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 6, size=n) / 5.0  # many ties
        a = auroc(scores, labels)
        worst = max(worst, abs(a - brute_auroc(scores, labels)))
        invariant &= auroc(np.exp(3 * scores) - 2.0, labels) == a
    ok = worst <= 1e-12 and invariant
    criterion(7, ok, f"max |auroc - brute force| {worst:.1e} (<= 1e-12), "
                     f"monotone invariance exact: {invariant}")
    assert ok


def test_criterion_08_mil_head_properties(criterion):
    rng = np.random.default_rng(8)
    drift, mass = 0.0, 0.0
    for kind, task in itertools.product(HEAD_KINDS, (TASK, TaskSpec("multiclass", 3))):
        head = MILHead(kind, 12, task, seed=1)
        h = rng.normal(size=(9, 12))
        with Graph(mode=INFERENCE):
            base = aggregate(h, head)
            perm = aggregate(h[rng.permutation(9)], head)
            single = aggregate(h[:1], head)
        drift = max(drift, float(np.max(np.abs(base.logits - perm.logits))))
        mass = max(mass, abs(base.attention_weights.sum() - 1), abs(single.attention_weights.sum() - 1))
        assert np.all(np.isfinite(single.logits))
    ok = drift <= 1e-9 and mass <= 1e-6
    criterion(8, ok, f"permutation drift {drift:.1e} (<= 1e-9), attention mass error "
                     f"{mass:.1e} (<= 1e-6), n=1 bags finite")
    assert ok


SMALL = """\
[experiment]
backbone = random
out_dir = {out}
[model]
image_size = 16
embed_dim = 16
[train]
epochs = 2
instance_batch_size = 8
base_lr = 0.01
[data]
image_size = 16
n_min = 4
n_max = 8
num_train = 8
num_val = 4
num_test = 6
"""


def _records(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


def test_criterion_09_ablation_harness(criterion, tmp_path, capsys):
    path = tmp_path / "a.ini"
    path.write_text(SMALL.format(out=tmp_path / "ablate"))
    code = cli.main(["ablate-k", "--config", str(path), "--ks", "1,2,3"])
    captured = capsys.readouterr()
    rows = [r for r in _records(captured.out) if r.get("record") == "ablate_k"]
    shared = len({(r["data_fingerprint"], r["seed_fingerprint"]) for r in rows}) == 1
    ok = code == 0 and [r["k"] for r in rows] == [1, 2, 3] and shared
    order = ", ".join(f"k={r['k']}: {r['accuracy']:.3f}" for r in rows)
    criterion(9, ok, f"exit {code}, {len(rows)} rows, shared fingerprints {shared}; "
                     f"reported accuracy {order}")
    assert ok


def test_criterion_10_determinism(criterion, tmp_path, capsys):
    path = tmp_path / "d.ini"
    path.write_text(SMALL.format(out=tmp_path / "det"))
    outs = []
    for _ in range(2):
        assert cli.main(["train", "--config", str(path)]) == 0
        metric = []
        for rec in _records(capsys.readouterr().out):
            rec.pop("secs_per_bag", None)
            metric.append(json.dumps(rec, sort_keys=True))
        outs.append("\n".join(metric).encode())
    ok = outs[0] == outs[1]
    criterion(10, ok, f"two identical train invocations byte-identical metrics: {ok}")
    assert ok
