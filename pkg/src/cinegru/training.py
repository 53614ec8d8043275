"""Loss, optimizer and the per-fold two-phase training protocol.

Phase one trains the frame-pair baseline on every fold. Phase two strips
each fold's baseline head, attaches a fresh ConvGRU and trains on whole
series, using the same split so a fold's encoder never saw that fold's
validation patients.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import models as M
from . import rng as rngmod
from . import tensor as T
from .eval_stats import SplitPlan, write_val_scores
from .synthcine import Series, normalize_series, select_inspexp_pair
from .tensor import Tensor

log = logging.getLogger(__name__)

P_EPS = 1e-7


class LeakageError(RuntimeError):
    pass


class TrainingDataError(ValueError):
    pass


# ---------------------------------------------------------------- loss / optimizer


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 targets."""
    y = np.asarray(y, dtype=p.dtype).reshape(p.shape)
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"targets must be 0 or 1, got {np.unique(y)}")
    pc = np.clip(p.data, P_EPS, 1 - P_EPS)
    n = p.size
    loss = -(y * np.log(pc) + (1 - y) * np.log1p(-pc)).mean()
    inside = (p.data >= P_EPS) & (p.data <= 1 - P_EPS)

    def bw(g):
        return (g * (-y / pc + (1 - y) / (1 - pc)) / n * inside,)

    return T._make(np.asarray(loss, dtype=p.dtype), (p,), bw, "bce")


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(s)
    return total


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# ---------------------------------------------------------------- configs / results


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 40
    batch_size: int = 8
    seed: int = 0
    encoder_mode: str = "finetune"
    patience: int = 10
    early_stop: bool = True
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.encoder_mode not in ("finetune", "freeze"):
            raise ValueError(f"encoder_mode must be 'finetune' or 'freeze', got {self.encoder_mode!r}")

    @property
    def hash(self) -> str:
        return config_hash(asdict(self))


def config_hash(d: dict) -> str:
    """Git-style content hash of a JSON-serializable config."""
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def state_hash(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state[k], dtype=np.float32).tobytes())
    return h.hexdigest()


@dataclass
class FoldResult:
    fold: int
    arch: str
    state: dict[str, np.ndarray]
    val_scores: dict[str, float]
    curve: list[tuple[int, float, float]]
    best_epoch: int
    split_hash: str
    config: dict = field(default_factory=dict)
    init_hash: str = ""

    @property
    def checkpoint_hash(self) -> str:
        return state_hash(self.state)


def _fold_partition(series: Sequence[Series], split: SplitPlan, fold: int) -> tuple[list[Series], list[Series]]:
    val_p = split.fold_patients(fold)
    train = [s for s in series if s.patient_id not in val_p]
    val = [s for s in series if s.patient_id in val_p]
    overlap = {s.patient_id for s in train} & {s.patient_id for s in val}
    if overlap:
        raise LeakageError(f"fold {fold}: patients in both partitions: {sorted(overlap)}")
    unknown = {s.patient_id for s in series} - set(split.assignment)
    if unknown:
        raise TrainingDataError(f"patients missing from split plan: {sorted(unknown)[:5]}")
    if len({s.label for s in train}) < 2:
        raise TrainingDataError(f"fold {fold}: training data contains a single class")
    return train, val


def _blas_single_thread():
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(1)
    except ImportError:  # pragma: no cover
        return None


def _run_folds(fn: Callable, args: list[tuple], threads: int) -> list:
    if threads <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=threads, initializer=_blas_single_thread) as ex:
        return list(ex.map(fn, *zip(*args)))


# ---------------------------------------------------------------- generic loop


def _fit(
    model: M.Module,
    params: list[Tensor],
    train_items: list,
    val_items: list,
    batch_loss: Callable[[list], Tensor],
    cfg: TrainConfig,
    stream_name: tuple,
    batch_size: int,
):
    """Adam with early stopping; returns (best_state, curve, best_epoch)."""
    opt = Adam(params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    best = (np.inf, None, 0)
    curve = []
    since_best = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rngmod.stream(cfg.seed, *stream_name, "epoch", epoch).permutation(len(train_items))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [train_items[i] for i in order[start : start + batch_size]]
            opt.zero_grad()
            loss = batch_loss(batch)
            T.backward(loss, params=params)
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            losses.append(loss.item() * len(batch))
        train_loss = float(np.sum(losses) / len(train_items))
        model.eval()
        with T.no_grad():
            val_loss = float(np.mean([batch_loss([it]).item() for it in val_items])) if val_items else float("nan")
        curve.append((epoch, train_loss, val_loss))
        log.debug("%s epoch %d train %.4f val %.4f", stream_name, epoch, train_loss, val_loss)
        if not cfg.early_stop or not val_items:
            best = (val_loss, None, epoch)
            continue
        if val_loss < best[0]:
            best = (val_loss, {k: v.copy() for k, v in model.state_dict().items()}, epoch)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if best[1] is None:
        state = {k: v.copy() for k, v in model.state_dict().items()}
    else:
        state = best[1]
        model.load_state_dict(state)
    model.eval()
    return state, curve, best[2]


# ---------------------------------------------------------------- baseline


def baseline_input(s: Series) -> np.ndarray:
    """Normalized insp/exp frame pair ``[2,H,W]`` of one series."""
    i, j = select_inspexp_pair(s.frames)
    f = normalize_series(s.frames)
    return np.stack([f[i], f[j]])


def _baseline_fold(series, split, fold, cfg: TrainConfig, enc_cfg: M.EncoderConfig) -> FoldResult:
    train, val = _fold_partition(series, split, fold)
    model = M.build_baseline(M.EncoderConfig(**asdict(enc_cfg)), rngmod.derive_seed(cfg.seed, "baseline", fold))
    params = list(model.parameters().values())
    dtype = params[0].dtype
    tr_items = [(baseline_input(s), s.label) for s in train]
    va_items = [(baseline_input(s), s.label) for s in val]

    def batch_loss(batch):
        x = Tensor(np.stack([b[0] for b in batch]).astype(dtype))
        return bce_loss(model(x), [b[1] for b in batch])

    state, curve, best_epoch = _fit(
        model, params, tr_items, va_items, batch_loss, cfg, ("baseline", fold), cfg.batch_size
    )
    with T.no_grad():
        scores = {s.series_id: model(Tensor(it[0][None].astype(dtype))).item() for s, it in zip(val, va_items)}
    return FoldResult(
        fold, "baseline", state, scores, curve, best_epoch, split.hash,
        {"train": asdict(cfg), "encoder": asdict(enc_cfg)},
    )


def train_baseline(
    series: Sequence[Series],
    split: SplitPlan,
    cfg: TrainConfig,
    enc_cfg: M.EncoderConfig | None = None,
    threads: int = 1,
) -> list[FoldResult]:
    enc_cfg = enc_cfg or M.EncoderConfig("tiny")
    args = [(list(series), split, f, cfg, enc_cfg) for f in range(split.k)]
    return _run_folds(_baseline_fold, args, threads)


def load_baseline(result: FoldResult) -> M.BaselineModel:
    enc_cfg = M.EncoderConfig(**result.config["encoder"])
    model = M.build_baseline(enc_cfg, 0)
    model.load_state_dict(result.state)
    return model


# ---------------------------------------------------------------- hybrid


def _hybrid_fold(series, split, fold, base: FoldResult, cfg: TrainConfig, gru_cfg: M.ConvGRUConfig) -> FoldResult:
    if base.split_hash != split.hash:
        raise LeakageError(f"fold {fold}: baseline split {base.split_hash} != hybrid split {split.hash}")
    train, val = _fold_partition(series, split, fold)
    baseline = load_baseline(base)
    encoder = M.strip_head(baseline)
    init_hash = state_hash({k: v for k, v in base.state.items() if not k.startswith("head.")})
    model = M.build_hybrid(encoder, M.ConvGRUConfig(**asdict(gru_cfg)), rngmod.derive_seed(cfg.seed, "hybrid", fold))
    dtype = model.gru.b_z.dtype
    norm = {s.series_id: normalize_series(s.frames) for s in train + val}

    enc_params = list(encoder.parameters().values())
    if cfg.encoder_mode == "freeze":
        encoder.eval()
        for p in enc_params:
            p.requires_grad = False
        params = list(model.gru.parameters().values())
        with T.no_grad():
            feats = {sid: _encode_pairs(encoder, f) for sid, f in norm.items()}

        def forward(sid):
            return _gru_forward(model.gru, feats[sid])

        class _Frozen(M.Module):
            def __init__(self):
                self.gru = model.gru

        fit_model = _Frozen()
    else:
        params = list(model.parameters().values())

        def forward(sid):
            return model(norm[sid])

        fit_model = model

    def batch_loss(batch):
        return bce_loss(forward(batch[0][0]), [batch[0][1]])

    tr_items = [(s.series_id, s.label) for s in train]
    va_items = [(s.series_id, s.label) for s in val]
    state, curve, best_epoch = _fit(fit_model, params, tr_items, va_items, batch_loss, cfg, ("hybrid", fold), 1)
    if cfg.encoder_mode == "freeze":
        for p in enc_params:
            p.requires_grad = True
        state = {**{f"encoder.{k}": v.copy() for k, v in encoder.state_dict().items()}, **state}
    model.eval()
    with T.no_grad():
        scores = {sid: forward(sid).item() for sid, _ in va_items}
    return FoldResult(
        fold, "hybrid", state, scores, curve, best_epoch, split.hash,
        {"train": asdict(cfg), "encoder": base.config["encoder"], "convgru": asdict(gru_cfg)},
        init_hash,
    )


def _encode_pairs(encoder: M.Encoder, frames: np.ndarray) -> Tensor:
    x = frames.astype(encoder.stem_conv.weight.dtype, copy=False)
    return encoder(Tensor(np.stack([x[:-1], x[1:]], axis=1)))


def _gru_forward(gru: M.ConvGRU, feats: Tensor) -> Tensor:
    proj = gru.input_projection(feats)
    h = gru.init_hidden(1, feats.shape[2], feats.shape[3])
    for t in range(feats.shape[0]):
        h, _ = gru.step_projected(proj[t : t + 1], h)
    return gru.classify(h)


def train_hybrid(
    series: Sequence[Series],
    split: SplitPlan,
    baseline_results: Sequence[FoldResult],
    cfg: TrainConfig,
    gru_cfg: M.ConvGRUConfig | None = None,
    threads: int = 1,
) -> list[FoldResult]:
    by_fold = {r.fold: r for r in baseline_results}
    missing = [f for f in range(split.k) if f not in by_fold]
    if missing:
        raise TrainingDataError(f"no baseline checkpoint for folds {missing}")
    for r in baseline_results:
        if r.split_hash != split.hash:
            raise LeakageError(f"split plan mismatch: baseline {r.split_hash} vs hybrid {split.hash}")
    if gru_cfg is None:
        enc_cfg = M.EncoderConfig(**baseline_results[0].config["encoder"])
        gru_cfg = M.ConvGRUConfig(enc_cfg.out_channels, 32)
    args = [(list(series), split, f, by_fold[f], cfg, gru_cfg) for f in range(split.k)]
    return _run_folds(_hybrid_fold, args, threads)


def load_hybrid(result: FoldResult) -> M.HybridModel:
    enc_cfg = M.EncoderConfig(**result.config["encoder"])
    encoder = M.strip_head(M.build_baseline(enc_cfg, 0))
    model = M.build_hybrid(encoder, M.ConvGRUConfig(**result.config["convgru"]), 0)
    model.load_state_dict(result.state)
    model.eval()
    return model


# ---------------------------------------------------------------- run directories


def pooled_rows(results: Sequence[FoldResult], series: Sequence[Series]) -> list[tuple[str, str, int, float]]:
    by_id = {s.series_id: s for s in series}
    rows = []
    for r in results:
        for sid, score in r.val_scores.items():
            s = by_id[sid]
            rows.append((sid, s.patient_id, s.label, score))
    return sorted(rows)


def write_run(run_dir: str | Path, results: Sequence[FoldResult], series: Sequence[Series], split: SplitPlan, extra_meta: dict | None = None) -> Path:
    """``run_dir/fold<k>/{checkpoint, metadata.json, curve.csv, val_scores.csv}`` plus ``split.json``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "split.json").write_text(split.to_json() + "\n")
    by_id = {s.series_id: s for s in series}
    for r in results:
        d = run_dir / f"fold{r.fold}"
        d.mkdir(exist_ok=True)
        T.save_tensors(d / "checkpoint", r.state)
        meta = {
            "arch": r.arch,
            "fold": r.fold,
            "config": r.config,
            "seed": r.config["train"]["seed"],
            "train_config_hash": config_hash(r.config["train"]),
            "split_hash": r.split_hash,
            "best_epoch": r.best_epoch,
            "checkpoint_hash": r.checkpoint_hash,
            "encoder_init_hash": r.init_hash,
            **(extra_meta or {}),
        }
        tmp = d / "metadata.json.tmp"
        tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        tmp.replace(d / "metadata.json")
        with open(d / "curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, tl, vl in r.curve:
                w.writerow([e, repr(tl), repr(vl)])
        rows = [(sid, by_id[sid].patient_id, by_id[sid].label, sc) for sid, sc in sorted(r.val_scores.items())]
        write_val_scores(d / "val_scores.csv", rows)
    return run_dir


def read_run(run_dir: str | Path) -> tuple[SplitPlan, list[FoldResult]]:
    """Reload fold checkpoints and scores written by :func:`write_run`."""
    from .eval_stats import read_val_scores

    run_dir = Path(run_dir)
    split = SplitPlan.from_json((run_dir / "split.json").read_text())
    results = []
    for f in range(split.k):
        d = run_dir / f"fold{f}"
        meta = json.loads((d / "metadata.json").read_text())
        state = T.load_tensors(d / "checkpoint")
        preds = read_val_scores([d / "val_scores.csv"])
        with open(d / "curve.csv", newline="") as fh:
            curve = [(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"])) for r in csv.DictReader(fh)]
        results.append(
            FoldResult(
                f, meta["arch"], state, dict(zip(preds.series_ids, preds.scores.tolist())), curve,
                meta["best_epoch"], meta["split_hash"], meta["config"], meta.get("encoder_init_hash", ""),
            )
        )
    return split, results
