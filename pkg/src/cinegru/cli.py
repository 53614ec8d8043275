"""Command-line front door: ``gen-data``, ``train``, ``evaluate``, ``compare``.

Configuration is resolved as defaults, then an optional flat ``key = value``
file (``--config``), then explicit flags. Every command writes the resolved
configuration to ``config.resolved`` in its output location; passing that
file back through ``--config`` reproduces the outputs.

Exit codes: 0 success, 2 usage error, 3 data or validation error,
4 non-finite numbers during training.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import __version__
from . import eval_stats as E
from . import models as M
from . import synthcine as S
from . import training as TR
from .tensor import NonFiniteError

log = logging.getLogger("cinegru")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_str(v):
    return None if v in (None, "", "none", "None") else str(v)


@dataclass(frozen=True)
class Opt:
    key: str
    type: Callable[[Any], Any]
    default: Any
    help: str
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        return "--" + (self.key if len(self.key) == 1 else self.key.replace("_", "-"))


_SYNTH = S.SynthConfig()

GEN_OPTS = [
    Opt("out", str, None, "output dataset directory (required)"),
    Opt("patients", int, 40, "number of patients"),
    Opt("series_per_patient", str, "1-3", "series per patient: N, an inclusive range LO-HI, or a comma list"),
    Opt("total_series", int, 0, "if > 0, spread exactly this many series over the patients (overrides --series-per-patient)"),
    Opt("prevalence", float, 0.5, "fraction of positive patients"),
    Opt("mode", str, "temporal_only", "difficulty mode", S.MODES),
    Opt("T", int, 30, "frames per series"),
    Opt("H", int, 64, "frame height"),
    Opt("W", int, 48, "frame width"),
    Opt("slip_amplitude_px", float, _SYNTH.slip_amplitude_px, "peak tangential slip in pixels"),
    Opt("cycles", float, _SYNTH.cycles, "motion cycles per series"),
    Opt("adhesion_patch_frac", float, _SYNTH.adhesion_patch_frac, "tethered fraction of the interface in positives"),
    Opt("noise_sigma", float, _SYNTH.noise_sigma, "per-pixel Gaussian noise"),
    Opt("seed", int, 0, "generator seed"),
]

TRAIN_OPTS = [
    Opt("dataset", str, None, "dataset directory (required)"),
    Opt("arch", str, None, "model to train (required)", ("baseline", "hybrid")),
    Opt("out", str, None, "run directory (required)"),
    Opt("pretrained", _opt_str, None, "baseline run directory; required for --arch hybrid"),
    Opt("folds", int, 5, "cross-validation folds"),
    Opt("seed", int, 0, "split and training seed"),
    Opt("encoder", str, "tiny", "encoder variant for the baseline", ("tiny", "resnet18")),
    Opt("learning_rate", float, 1e-3, "Adam learning rate"),
    Opt("epochs", int, 30, "maximum epochs per fold"),
    Opt("batch_size", int, 8, "baseline mini-batch size (the hybrid always uses one series)"),
    Opt("patience", int, 10, "early-stopping patience in epochs"),
    Opt("early_stop", _bool, True, "restore the best validation-loss checkpoint"),
    Opt("clip_norm", float, 5.0, "global gradient-norm clip"),
    Opt("encoder_mode", str, "finetune", "hybrid encoder handling", ("finetune", "freeze")),
    Opt("hidden_channels", int, 32, "ConvGRU hidden channels"),
    Opt("gru_kernel", int, 3, "ConvGRU kernel size (odd)"),
    Opt("threads", int, 1, "worker processes for fold-parallel training"),
]

EVAL_OPTS = [
    Opt("run", str, None, "run directory (required)"),
    Opt("bootstrap", int, 1000, "bootstrap resamples"),
    Opt("bootstrap_unit", str, "series", "bootstrap resampling unit", ("series", "patient")),
    Opt("alpha", float, 0.05, "two-sided interval level"),
    Opt("seed", int, 0, "bootstrap seed"),
    Opt("out", _opt_str, None, "output directory (default: the run directory)"),
]

COMPARE_OPTS = [
    Opt("run_a", str, None, "first run directory (required)"),
    Opt("run_b", str, None, "second run directory (required)"),
    Opt("n_perm", int, 10000, "permutations"),
    Opt("seed", int, 0, "permutation seed"),
    Opt("out", _opt_str, None, "output directory (default: the first run directory)"),
]

COMMANDS = {"gen-data": GEN_OPTS, "train": TRAIN_OPTS, "evaluate": EVAL_OPTS, "compare": COMPARE_OPTS}


# ---------------------------------------------------------------- config resolution


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {'' if v is None else v}\n" for k, v in sorted(cfg.items()))


def resolve(opts: list[Opt], args: argparse.Namespace) -> dict:
    cfg = {o.key: o.default for o in opts}
    if args.config:
        try:
            file_cfg = read_config_file(args.config)
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}") from e
        known = {o.key: o for o in opts}
        unknown = sorted(set(file_cfg) - set(known))
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {unknown}")
        for k, v in file_cfg.items():
            try:
                cfg[k] = known[k].type(v) if v != "" else None
            except ValueError as e:
                raise UsageError(f"{args.config}: bad value for {k}: {e}") from e
    for o in opts:
        v = getattr(args, o.key)
        if v is not None:
            cfg[o.key] = v
    for o in opts:
        if o.choices and cfg[o.key] is not None and cfg[o.key] not in o.choices:
            raise UsageError(f"{o.flag} must be one of {o.choices}, got {cfg[o.key]!r}")
        if o.default is None and o.type is str and cfg[o.key] is None:
            raise UsageError(f"{o.flag} is required")
    return cfg


def write_snapshot(directory: Path, cfg: dict) -> str:
    text = format_config(cfg)
    (directory / "config.resolved").write_text(text)
    return TR.config_hash(cfg)


def _prepare_out(path: Path, force: bool, owned: list[str]) -> None:
    """Refuse a non-empty directory unless ``force``; then clear the entries we write."""
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        for name in owned:
            for p in path.glob(name):
                shutil.rmtree(p) if p.is_dir() else p.unlink()
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------- commands


def _spp(value: str):
    value = value.strip()
    if "," in value:
        return [int(x) for x in value.split(",")]
    if "-" in value:
        lo, hi = (int(x) for x in value.split("-", 1))
        if not 1 <= lo <= hi:
            raise UsageError(f"bad series-per-patient range {value!r}")
        return (lo, hi)
    return int(value)


def cmd_gen_data(cfg: dict, force: bool) -> int:
    out = Path(cfg["out"])
    _prepare_out(out, force, ["series", "manifest.json", "config.resolved"])
    synth = S.SynthConfig(
        T=cfg["T"], H=cfg["H"], W=cfg["W"], slip_amplitude_px=cfg["slip_amplitude_px"], cycles=cfg["cycles"],
        adhesion_patch_frac=cfg["adhesion_patch_frac"], noise_sigma=cfg["noise_sigma"], mode=cfg["mode"],
    )
    if cfg["total_series"] > 0:
        spp = S.counts_for_total(cfg["patients"], cfg["total_series"], cfg["seed"])
    else:
        try:
            spp = _spp(cfg["series_per_patient"])
        except ValueError as e:
            raise UsageError(f"bad --series-per-patient: {e}") from e
    manifest = S.generate_dataset(out, synth, cfg["patients"], spp, cfg["prevalence"], cfg["seed"])
    S.validate_manifest(out)
    write_snapshot(out, cfg)
    print(f"{len(manifest.series)} series from {len(manifest.patient_ids)} patients")
    print(f"manifest checksum {manifest.checksum}")
    return EXIT_OK


def _blas_limit(threads: int):
    if threads != 1:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(1)


def cmd_train(cfg: dict, force: bool) -> int:
    if cfg["arch"] == "hybrid" and not cfg["pretrained"]:
        raise UsageError("--arch hybrid requires --pretrained <baseline run>")
    manifest = S.validate_manifest(cfg["dataset"])
    _, series = S.load_dataset(cfg["dataset"])
    split = E.group_kfold([s.patient_id for s in series], cfg["folds"], cfg["seed"])
    tcfg = TR.TrainConfig(
        learning_rate=cfg["learning_rate"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        encoder_mode=cfg["encoder_mode"], patience=cfg["patience"], early_stop=cfg["early_stop"],
        clip_norm=cfg["clip_norm"],
    )

    base_results = None
    if cfg["arch"] == "hybrid":
        pre = Path(cfg["pretrained"])
        if not (pre / "split.json").exists():
            raise S.DataError(f"{pre} is not a completed run (no split.json)")
        pre_split, base_results = TR.read_run(pre)
        if pre_split.hash != split.hash:
            raise TR.LeakageError(
                f"split plan mismatch: pretrained run {pre_split.hash} vs this run {split.hash}"
            )
        if any(r.arch != "baseline" for r in base_results):
            raise S.DataError(f"{pre} is not a baseline run")
        pre_meta = json.loads((pre / "fold0" / "metadata.json").read_text())
        if pre_meta.get("dataset_checksum") not in (None, manifest.checksum):
            raise S.DataError(f"{pre} was trained on a different dataset")

    out = Path(cfg["out"])
    _prepare_out(out, force, ["fold*", "split.json", "config.resolved"])
    chash = TR.config_hash(cfg)
    with _blas_limit(cfg["threads"]):
        if cfg["arch"] == "baseline":
            results = TR.train_baseline(series, split, tcfg, M.EncoderConfig(cfg["encoder"]), cfg["threads"])
        else:
            enc = M.EncoderConfig(**base_results[0].config["encoder"])
            gru = M.ConvGRUConfig(enc.out_channels, cfg["hidden_channels"], cfg["gru_kernel"])
            results = TR.train_hybrid(series, split, base_results, tcfg, gru, cfg["threads"])
    meta = {"resolved_config_hash": chash, "dataset_checksum": manifest.checksum, "version": __version__}
    TR.write_run(out, results, series, split, meta)
    write_snapshot(out, cfg)
    rows = TR.pooled_rows(results, series)
    pooled = E.PredictionSet([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows], [r[3] for r in rows])
    print(f"{cfg['arch']}: {split.k} folds, split {split.hash}, config {chash}")
    print(f"pooled validation AUROC {E.auroc(pooled):.4f}")
    return EXIT_OK


def load_predictions(run: str | Path) -> E.PredictionSet:
    run = Path(run)
    if not (run / "split.json").exists():
        raise S.DataError(f"{run}: missing split.json")
    split = E.SplitPlan.from_json((run / "split.json").read_text())
    files = [run / f"fold{f}" / "val_scores.csv" for f in range(split.k)]
    missing = [str(p) for p in files if not p.exists()]
    if missing:
        raise S.DataError(f"missing fold files: {missing}")
    meta = json.loads((run / "fold0" / "metadata.json").read_text()) if (run / "fold0" / "metadata.json").exists() else {}
    preds = E.read_val_scores(files, model=meta.get("arch", run.name))
    preds.provenance.update({"run": str(run), "split_hash": split.hash})
    return preds


def _dump_json(path: Path, obj: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def cmd_evaluate(cfg: dict, force: bool) -> int:
    preds = load_predictions(cfg["run"])
    out = Path(cfg["out"] or cfg["run"])
    out.mkdir(parents=True, exist_ok=True)
    if not force and cfg["out"] and (out / "metrics.json").exists():
        raise UsageError(f"{out / 'metrics.json'} exists (use --force to overwrite)")
    auc = E.auroc(preds)
    lo, hi = E.bootstrap_ci(preds, cfg["bootstrap"], cfg["alpha"], cfg["seed"], cfg["bootstrap_unit"])
    curve = E.roc_curve(preds)
    metrics = {
        "auroc": auc, "ci_lo": lo, "ci_hi": hi, "n": len(preds), "B": cfg["bootstrap"], "seed": cfg["seed"],
        "alpha": cfg["alpha"], "bootstrap_unit": cfg["bootstrap_unit"], "model": preds.model,
        "split_hash": preds.provenance["split_hash"],
    }
    _dump_json(out / "metrics.json", metrics)
    E.write_roc_csv(out / "roc.csv", curve)
    (out / "roc.svg").write_text(E.roc_svg({preds.model or "model": (curve, auc)}))
    (out / "evaluate.config.resolved").write_text(format_config(cfg))
    print(f"AUROC {auc:.4f} ({1 - cfg['alpha']:.0%} CI {lo:.4f}-{hi:.4f}), n={len(preds)}")
    return EXIT_OK


def cmd_compare(cfg: dict, force: bool) -> int:
    a, b = load_predictions(cfg["run_a"]), load_predictions(cfg["run_b"])
    out = Path(cfg["out"] or cfg["run_a"])
    out.mkdir(parents=True, exist_ok=True)
    if not force and cfg["out"] and (out / "compare.json").exists():
        raise UsageError(f"{out / 'compare.json'} exists (use --force to overwrite)")
    delta, p = E.perm_test_delta_auroc(a, b, cfg["n_perm"], cfg["seed"])
    res = {
        "auroc_a": E.auroc(a), "auroc_b": E.auroc(b), "delta": delta, "p_value": p, "n_perm": cfg["n_perm"],
        "seed": cfg["seed"], "n": len(a), "run_a": str(cfg["run_a"]), "run_b": str(cfg["run_b"]),
    }
    _dump_json(out / "compare.json", res)
    name_a = a.model or "A"
    name_b = b.model if b.model and b.model != name_a else "B"
    curves = {name_a: (E.roc_curve(a), res["auroc_a"]), name_b: (E.roc_curve(b), res["auroc_b"])}
    (out / "compare_roc.svg").write_text(E.roc_svg(curves))
    (out / "compare.config.resolved").write_text(format_config(cfg))
    print(f"AUROC A {res['auroc_a']:.4f}  B {res['auroc_b']:.4f}  delta {delta:+.4f}  p {p:.4g}")
    return EXIT_OK


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare}

DESCRIPTIONS = {
    "gen-data": "Generate a synthetic cine dataset and its manifest.",
    "train": "Train the frame-pair baseline or the ConvGRU hybrid with patient-grouped cross-validation.",
    "evaluate": "Pool fold predictions; write AUROC with a bootstrap interval and ROC artifacts.",
    "compare": "Paired permutation test of the AUROC difference between two runs.",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cinegru", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name])
        for o in opts:
            kw: dict[str, Any] = {"dest": o.key, "default": None, "type": o.type}
            if o.choices:
                kw["choices"] = o.choices
            shown = "" if o.default is None else f" (default: {o.default})"
            p.add_argument(o.flag, help=o.help + shown, **kw)
        p.add_argument("--config", help="flat 'key = value' file; flags override it")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(COMMANDS[args.command], args)
        return HANDLERS[args.command](cfg, args.force)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"cinegru {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except M.ConfigError as e:
        print(f"cinegru {args.command}: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as e:
        print(f"cinegru {args.command}: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (S.DataError, TR.LeakageError, TR.TrainingDataError, E.UndefinedAUROC, ValueError, OSError) as e:
        print(f"cinegru {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
