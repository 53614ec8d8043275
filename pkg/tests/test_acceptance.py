"""Acceptance suite: one PASS/FAIL line per criterion, listed again in the pytest terminal summary."""

import json
import time

import numpy as np
import pytest

from cinegru import cli
from cinegru import eval_stats as E
from cinegru import models as M
from cinegru import synthcine as S
from cinegru import tensor as T
from cinegru.rng import stream
from cinegru.tensor import Tensor

# desk-scale pipeline used for the qualitative reproduction
PIPELINE_SEEDS = (1, 2, 3)
GEN_FLAGS = ["--patients", 40, "--mode", "temporal_only"]
BASELINE_FLAGS = ["--epochs", 30]
HYBRID_FLAGS = [
    "--epochs", 60, "--patience", 20, "--encoder-mode", "freeze", "--hidden-channels", 32, "--gru-kernel", 1,
]


def report(log, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    log.append(line)
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------


def _leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _op_builders():
    def unary(op):
        def build(rng):
            x = _leaf(rng.standard_normal((2, 3, 4, 3)))
            w = rng.standard_normal(x.shape)
            return (lambda: (op(x) * w).sum()), [x]

        return build

    def binary(op):
        def build(rng):
            a, b = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((3, 4)))
            w = rng.standard_normal((3, 4))
            return (lambda: (op(a, b) * w).sum()), [a, b]

        return build

    def relu(rng):
        x0 = rng.standard_normal((2, 3, 4))
        x = _leaf(np.where(np.abs(x0) < 0.05, 0.5, x0))
        w = rng.standard_normal(x0.shape)
        return (lambda: (T.relu(x) * w).sum()), [x]

    def log(rng):
        x = _leaf(rng.uniform(0.2, 2.0, (3, 4)))
        w = rng.standard_normal((3, 4))
        return (lambda: (T.log(x) * w).sum()), [x]

    def maxpool(rng):
        x = _leaf(rng.permutation(np.arange(2 * 2 * 7 * 6, dtype=np.float64)).reshape(2, 2, 7, 6) / 10)
        w = rng.standard_normal(T.maxpool2d(x).shape)
        return (lambda: (T.maxpool2d(x) * w).sum()), [x]

    def gap(rng):
        x = _leaf(rng.standard_normal((2, 3, 4, 5)))
        w = rng.standard_normal((2, 3))
        return (lambda: (T.global_avg_pool(x) * w).sum()), [x]

    def linear(rng):
        x, W, b = _leaf(rng.standard_normal((4, 5))), _leaf(rng.standard_normal((3, 5))), _leaf(rng.standard_normal(3))
        w = rng.standard_normal((4, 3))
        return (lambda: (T.linear(x, W, b) * w).sum()), [x, W, b]

    def bn(train):
        def build(rng):
            x = _leaf(rng.standard_normal((4, 3, 3, 3)) * 2 + 1)
            g, b = _leaf(rng.standard_normal(3)), _leaf(rng.standard_normal(3))
            rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
            w = rng.standard_normal((4, 3, 3, 3))
            return (lambda: (T.batchnorm2d(x, g, b, rm, rv, train)[0] * w).sum()), [x, g, b]

        return build

    def cat(rng):
        a, b = _leaf(rng.standard_normal((2, 2, 3, 3))), _leaf(rng.standard_normal((2, 3, 3, 3)))
        w = rng.standard_normal((2, 5, 3, 3))
        return (lambda: (T.concat_channels([a, b]) * w).sum()), [a, b]

    def conv(rng):
        x, k, b = _leaf(rng.standard_normal((2, 3, 6, 5))), _leaf(rng.standard_normal((2, 3, 3, 3))), _leaf(rng.standard_normal(2))
        w = rng.standard_normal((2, 2, 3, 3))
        return (lambda: (T.conv2d(x, k, b, 2, 1) * w).sum()), [x, k, b]

    return {
        "sigmoid": unary(T.sigmoid), "tanh": unary(T.tanh), "relu": relu, "log": log,
        "add": binary(T.add), "sub": binary(T.sub), "mul": binary(T.mul),
        "maxpool2d": maxpool, "global_avg_pool": gap, "linear": linear,
        "batchnorm_train": bn(True), "batchnorm_eval": bn(False), "concat_channels": cat, "conv2d": conv,
    }


def _grads(f, leaves):
    for t in leaves:
        t.grad = None
    T.backward(f())
    return [t.grad.copy() for t in leaves]


def test_criterion_1_gradients(acceptance_log):
    start = time.perf_counter()
    builders = _op_builders()
    worst_op = 0.0
    for trial in range(100):
        for name, build in builders.items():
            f, leaves = build(stream(trial, "accept-gradcheck", name))
            for t, g in zip(leaves, _grads(f, leaves)):
                worst_op = max(worst_op, T.rel_error(g, T.numerical_grad(f, t, 1e-5), floor=1e-6))

    base = M.build_baseline(M.EncoderConfig("tiny"), 0, dtype=np.float64)
    model = M.build_hybrid(M.strip_head(base), M.ConvGRUConfig(64, 4), 0)
    params = model.parameters()
    worst_e2e = 0.0
    for trial in range(100):
        frames = stream(trial, "accept-e2e").random((3, 16, 16))

        def loss():
            return T.log(model(frames)).sum()

        params.zero_grad()
        T.backward(loss())
        rng = stream(trial, "accept-coords")
        names = list(params)
        name = names[rng.integers(len(names))]
        p = params[name]
        coords = rng.choice(p.size, size=min(3, p.size), replace=False)
        num = T.numerical_grad(loss, p, 1e-6, coords).reshape(-1)[coords]
        worst_e2e = max(worst_e2e, T.rel_error(p.grad.reshape(-1)[coords], num, floor=1e-6))
    took = time.perf_counter() - start
    report(
        acceptance_log, 1, worst_op < 1e-4 and worst_e2e < 1e-3 and took < 120,
        f"per-op max rel err {worst_op:.1e}, end-to-end {worst_e2e:.1e}, {took:.0f} s",
    )


# 2 -------------------------------------------------------------------------


def test_criterion_2_convgru_identities(acceptance_log):
    gru = M.ConvGRU(M.ConvGRUConfig(4, 3), stream(0, "accept-gru"), np.float64)
    rng = stream(1, "accept-gru-x")
    h = Tensor(rng.standard_normal((2, 3, 5, 4)) * 3)
    x = Tensor(rng.standard_normal((2, 4, 5, 4)) * 3)
    _, g = M.convgru_step(x, h, gru, return_gates=True)
    bounded = all(0 < g[k].data.min() and g[k].data.max() < 1 for k in ("z", "r"))

    for _, p in gru.named_parameters():
        p.data[...] = 0
    out = M.convgru_step(x, h, gru).data
    ulps = np.abs(out - 0.5 * h.data) / np.spacing(np.abs(0.5 * h.data))
    halved = bool(ulps.max() <= 1)

    base = M.build_baseline(M.EncoderConfig("tiny"), 0)
    model = M.build_hybrid(M.strip_head(base), M.ConvGRUConfig(64, 8), 0)
    steps = []
    for t in (2, 5, 9):
        s0, e0 = model.gru.steps, model.encoder.frames_encoded
        M.forward_hybrid(stream(t, "accept-steps").random((t, 32, 24)), model)
        steps.append((t, model.gru.steps - s0, model.encoder.frames_encoded - e0))
    counted = all(s == t - 1 and e == t - 1 for t, s, e in steps)
    report(acceptance_log, 2, bounded and halved and counted, f"max ulp {ulps.max():.0f}, gates in (0,1) {bounded}, steps {steps}")


# 3 -------------------------------------------------------------------------


def test_criterion_3_parameter_budget(acceptance_log):
    start = time.perf_counter()
    base = M.build_baseline(M.EncoderConfig("resnet18"), 0)
    gru = M.ConvGRU(M.ConvGRUConfig(512), stream(0, "accept-ratio"), np.float32)
    r = M.param_ratio(base, gru)
    took = time.perf_counter() - start
    report(acceptance_log, 3, 0.03 <= r <= 0.06 and took < 10, f"ratio {r:.4f}, {took:.1f} s")


# 4 -------------------------------------------------------------------------


def test_criterion_4_auroc_oracle(acceptance_log):
    exact, area_err = 0, 0.0
    for i in range(200):
        rng = stream(i, "accept-auroc")
        n = int(rng.integers(2, 60))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, 6, n) / 5.0  # coarse grid: many ties
        exact += E.auroc(s, y) == E.auroc_bruteforce(s, y)
        area_err = max(area_err, abs(E.trapezoid_area(E.roc_curve(s, y)) - E.auroc(s, y)))
    report(acceptance_log, 4, exact == 200 and area_err <= 1e-12, f"{exact}/200 exact, max area diff {area_err:.1e}")


# 5 -------------------------------------------------------------------------


def _preds(scores, labels, name):
    ids = [f"S{i:03d}" for i in range(len(scores))]
    return E.PredictionSet(ids, ids, np.asarray(labels), np.asarray(scores, float), name)


def test_criterion_5_statistics(acceptance_log):
    rng = stream(0, "accept-stats")
    y = np.repeat([0, 1], 30)
    s = rng.random(60) + 0.3 * y
    p_self = E.perm_test_delta_auroc(_preds(s, y, "a"), _preds(s, y, "b"), 1000, 0)[1]

    rejections = 0
    for t in range(200):
        r = stream(t, "accept-null")
        yy = np.repeat([0, 1], 25)
        a, b = r.random(50) + 0.5 * yy, r.random(50) + 0.5 * yy
        rejections += E.perm_test_delta_auroc(_preds(a, yy, "a"), _preds(b, yy, "b"), 200, t)[1] < 0.05
    rate = rejections / 200

    perfect = _preds(np.r_[np.zeros(10), np.ones(10)], np.repeat([0, 1], 10), "p")
    ci = E.bootstrap_ci(perfect, 500, seed=0)

    sizes = sorted(E.group_kfold([f"P{i}" for i in range(63)], 5, 0).fold_sizes(), reverse=True)
    ok = p_self == 1.0 and 0.01 <= rate <= 0.10 and tuple(ci) == (1.0, 1.0) and sizes == [13, 13, 13, 12, 12]
    report(acceptance_log, 5, ok, f"self p {p_self}, null rejection {rate:.3f}, perfect CI {tuple(ci)}, folds {sizes}")


# 6 and 7 -------------------------------------------------------------------


def _run_pipeline(root, seed):
    data, base, hyb = root / "data", root / "baseline", root / "hybrid"
    steps = [
        ["gen-data", "--out", data, "--seed", seed, *GEN_FLAGS],
        ["train", "--dataset", data, "--arch", "baseline", "--out", base, "--seed", seed, *BASELINE_FLAGS],
        ["train", "--dataset", data, "--arch", "hybrid", "--pretrained", base, "--out", hyb, "--seed", seed,
         *HYBRID_FLAGS],
        ["evaluate", "--run", base, "--seed", seed],
        ["evaluate", "--run", hyb, "--seed", seed],
        ["compare", "--run-a", hyb, "--run-b", base, "--seed", seed, "--out", root / "cmp"],
    ]
    for argv in steps:
        rc = cli.main([str(a) for a in argv])
        assert rc == 0, f"{argv[0]} exited {rc}"
    files = [base / "metrics.json", hyb / "metrics.json", root / "cmp" / "compare.json", base / "roc.csv", hyb / "roc.csv"]
    return {f.parent.name + "/" + f.name: f.read_bytes() for f in files}


def _metric_content(name, raw):
    """File content with the run locations removed (the rerun lives in another directory)."""
    if name.endswith(".json"):
        return {k: v for k, v in json.loads(raw).items() if k not in ("run_a", "run_b")}
    return raw


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return {seed: _run_pipeline(tmp_path_factory.mktemp(f"seed{seed}"), seed) for seed in PIPELINE_SEEDS}


def test_criterion_6_temporal_advantage(pipeline, acceptance_log):
    ok_seeds, lines = 0, []
    for seed, out in pipeline.items():
        c = json.loads(out["cmp/compare.json"])
        good = c["auroc_a"] >= 0.80 and c["delta"] >= 0.05 and c["p_value"] < 0.05
        ok_seeds += good
        lines.append(f"seed {seed}: hybrid {c['auroc_a']:.3f} baseline {c['auroc_b']:.3f} p {c['p_value']:.4f}")
    report(acceptance_log, 6, ok_seeds >= 2, f"{ok_seeds}/3 seeds; " + "; ".join(lines))


def test_criterion_7_bit_identical_rerun(pipeline, tmp_path, acceptance_log):
    seed = PIPELINE_SEEDS[0]
    again = _run_pipeline(tmp_path, seed)
    same = [k for k in again if _metric_content(k, again[k]) == _metric_content(k, pipeline[seed][k])]
    report(acceptance_log, 7, len(same) == len(again), f"seed {seed}: {len(same)}/{len(again)} metric files identical")


# 8 -------------------------------------------------------------------------


def test_criterion_8_oracle_separation(acceptance_log):
    clean = S.SynthConfig(mode="pairwise_detectable", noise_sigma=0.0)
    series = S.make_series_set(clean, 50, seed=8)
    scores = np.array([S.selected_pair_tether_score(s.frames) for s in series])
    y = np.array([s.label for s in series])
    # threshold halfway between the classes' means of a held-out calibration set
    calib = S.make_series_set(clean, 20, seed=80)
    cs = np.array([S.selected_pair_tether_score(s.frames) for s in calib])
    cy = np.array([s.label for s in calib])
    thr = (cs[cy == 1].min() + cs[cy == 0].max()) / 2
    acc = float(np.mean((scores > thr) == (y == 1)))

    temporal = S.make_series_set(S.SynthConfig(mode="temporal_only"), 100, seed=8)
    ty = [s.label for s in temporal]
    seq = E.auroc([S.sequence_tether_score(s.frames) for s in temporal], ty)
    pair = E.auroc([S.selected_pair_tether_score(s.frames) for s in temporal], ty)
    report(acceptance_log, 8, acc == 1.0 and seq > 0.9 and pair < 0.75, f"pairwise acc {acc:.2f}; temporal seq {seq:.3f} pair {pair:.3f}")
