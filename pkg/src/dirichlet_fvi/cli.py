"""Command-line entry point: ``dirichlet-fvi {gen-data, train, eval, compare}``.

Every command writes fixed file names under ``--out``. Settings resolve as
flags, then the JSON ``--config`` file, then built-in defaults; the
effective values are echoed into ``manifest.json``.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import calibration, dirichlet, fsvi
from .data import ClusterSpec, Dataset, feature_range, gen_clusters, gen_ood_test, load_csv, save_csv
from .exceptions import ConfigurationError, DataError, DomainError, TrainingError
from .net import load_checkpoint, save_checkpoint
from .numerics import Rng

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METHODS = ("standard", "dropout", "ensemble", "fsvi")
ENSEMBLE_FORMAT = "dirichlet-fvi-ensemble"
_OOD_TEST_STREAM = 11


@dataclass
class ExperimentConfig:
    """All tunable settings of a run. Field names double as config-file keys."""

    method: str = "fsvi"
    seed: int = 0
    hidden_sizes: tuple = (64, 64)
    epochs: int = fsvi.FsviConfig.epochs
    batch_size: int = 128
    lr: float = 1e-3
    kl_weight: float = fsvi.FsviConfig.kl_weight
    kl_warmup_epochs: int = 0
    ood_points_per_batch: int | None = fsvi.FsviConfig.ood_points_per_batch
    ood_std: float = fsvi.FsviConfig.ood_std
    alpha_head: str = fsvi.FsviConfig.alpha_head
    dropout_rate: float = fsvi.FsviConfig.dropout_rate
    ensemble_size: int = 5
    mc_passes: int = 32
    bins: int = calibration.DEFAULT_BINS
    bits: bool = False
    # benchmark generation
    classes: int = 3
    dim: int = 2
    n_per_class: int = 1000
    scale: float = 1.0
    overlap_gap: float = 1.5
    spread: float = 6.0
    ood_test_n: int = 600
    ood_margin: float = 1.0

    def validate(self) -> "ExperimentConfig":
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.method == "dropout" and not 0 < self.dropout_rate < 1:
            raise ConfigurationError("dropout needs 0 < dropout_rate < 1")
        if self.ensemble_size < 1:
            raise ConfigurationError("ensemble size must be >= 1")
        if self.mc_passes < 1:
            raise ConfigurationError("mc_passes must be >= 1")
        if self.bins < 1:
            raise ConfigurationError("bins must be >= 1")
        if self.classes < 2:
            raise ConfigurationError("--classes must be >= 2")
        if self.dim < 1 or self.n_per_class < 1 or self.ood_test_n < 1:
            raise ConfigurationError("dim, n_per_class and ood_test_n must be >= 1")
        if self.ood_margin < 0:
            raise ConfigurationError("ood_margin must be >= 0")
        if not 0 <= self.seed < 2**63:
            raise ConfigurationError("seed must be a non-negative 63-bit integer")
        self.fsvi_config()  # range checks shared with the trainer
        return self

    def fsvi_config(self) -> fsvi.FsviConfig:
        names = {f.name for f in fields(fsvi.FsviConfig)}
        return fsvi.FsviConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def cluster_spec(self) -> ClusterSpec:
        return ClusterSpec.default(self.classes, self.dim, self.n_per_class, self.scale, self.overlap_gap, self.spread)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


_CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)}


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            loaded = json.loads(path.read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        unknown = set(loaded) - _CONFIG_KEYS
        if unknown:
            raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
        values.update(loaded)
    for key in _CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    try:
        return ExperimentConfig(**values).validate()
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


# ---------------------------------------------------------------- file helpers


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_ndjson(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    return out


def _data_manifest(path: Path) -> dict | None:
    """The generation manifest for a data dir, manifest file or CSV inside one."""
    cand = path / "manifest.json" if path.is_dir() else path
    if cand.suffix == ".csv":
        cand = cand.parent / "manifest.json"
    if cand.is_file():
        m = _read_json(cand)
        if m.get("kind") == "dataset":
            return m
    return None


def _data_file(path: Path, split: str) -> Path:
    if path.is_dir():
        return path / f"{split}.csv"
    if path.suffix == ".json":
        return path.parent / f"{split}.csv"
    return path


def _infer_classes(path: Path) -> int:
    ds = load_csv(path, 2**31)
    if len(ds) == 0:
        raise DataError(f"{path}: no rows to infer the class count from")
    return int(ds.labels.max()) + 1


def load_split(path, split: str = "train", n_classes: int | None = None) -> tuple[Dataset, dict | None]:
    """Read a split from a data directory, its manifest, or a bare CSV."""
    path = Path(path)
    manifest = _data_manifest(path)
    csv_path = _data_file(path, split)
    if not csv_path.is_file():
        raise DataError(f"data file not found: {csv_path}")
    if n_classes is None:
        n_classes = manifest["n_classes"] if manifest else _infer_classes(csv_path)
    ds = load_csv(csv_path, n_classes)
    if manifest:
        std = manifest["standardization"]
        ds.mean, ds.scale = np.asarray(std["mean"]), np.asarray(std["scale"])
    return ds, manifest


# ------------------------------------------------------------ model persistence


def _build(method: str, cfg: ExperimentConfig):
    c = cfg.fsvi_config()
    common = dict(hidden_sizes=c.hidden_sizes, epochs=c.epochs, batch_size=c.batch_size, lr=c.lr, random_state=c.seed)
    if method == "fsvi":
        return fsvi.FunctionalVIClassifier(
            kl_weight=c.kl_weight,
            kl_warmup_epochs=c.kl_warmup_epochs,
            ood_points_per_batch=c.ood_points_per_batch,
            ood_std=c.ood_std,
            alpha_head=c.alpha_head,
            **common,
        )
    if method == "standard":
        return fsvi.StandardClassifier(**common)
    if method == "dropout":
        return fsvi.MCDropoutClassifier(dropout_rate=c.dropout_rate, n_passes=cfg.mc_passes, **common)
    return fsvi.DeepEnsembleClassifier(n_members=cfg.ensemble_size, **common)


_CLASSES = {
    "fsvi": fsvi.FunctionalVIClassifier,
    "standard": fsvi.StandardClassifier,
    "dropout": fsvi.MCDropoutClassifier,
}


def _trunk_meta(model, method, ds: Dataset, cfg: dict) -> dict:
    params = model.get_params()
    params["hidden_sizes"] = list(params["hidden_sizes"])
    return {
        "method": method,
        "estimator_params": params,
        "classes": model.classes_.tolist(),
        "n_classes": ds.n_classes,
        "standardization": {"mean": ds.mean.tolist(), "scale": ds.scale.tolist()},
        "config": cfg,
    }


def save_model(out: Path, model, method: str, ds: Dataset, cfg: dict) -> Path:
    """Write ``checkpoint.json``; ensembles add one file per member."""
    path = out / "checkpoint.json"
    if method != "ensemble":
        save_checkpoint(path, model.params_, **_trunk_meta(model, method, ds, cfg))
        return path
    members = []
    for i, m in enumerate(model.estimators_):
        name = f"checkpoint_member{i}.json"
        save_checkpoint(out / name, m.params_, **_trunk_meta(m, "standard", ds, cfg))
        members.append(name)
    _write_json(
        path,
        {
            "format": ENSEMBLE_FORMAT,
            "version": 1,
            "members": members,
            "meta": {"method": "ensemble", "n_classes": ds.n_classes, "config": cfg,
                     "standardization": {"mean": ds.mean.tolist(), "scale": ds.scale.tolist()}},
        },
    )
    return path


def _restore_trunk(path: Path):
    params, meta = load_checkpoint(path)
    est_params = dict(meta["estimator_params"])
    est_params["hidden_sizes"] = tuple(est_params["hidden_sizes"])
    model = _CLASSES[meta["method"]](**est_params)
    model.params_ = params
    model.classes_ = np.asarray(meta["classes"])
    model.n_features_in_ = params.arch.input_dim
    return model, meta


def load_model(path):
    """Inverse of ``save_model``; accepts the checkpoint file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    head = _read_json(path)
    if head.get("format") != ENSEMBLE_FORMAT:
        return _restore_trunk(path)
    members = [_restore_trunk(path.parent / name)[0] for name in head["members"]]
    ens = fsvi.DeepEnsembleClassifier(n_members=len(members))
    ens.estimators_ = members
    ens.classes_ = members[0].classes_
    ens.n_features_in_ = members[0].n_features_in_
    return ens, head["meta"]


# ------------------------------------------------------------------ evaluation


def _records(model, ds: Dataset, is_ood=False):
    labels = None if is_ood else ds.labels
    if isinstance(model, fsvi.FunctionalVIClassifier):
        a = model.predict_alpha(ds.features)
        return calibration.make_records(dirichlet.predictive_mean(a), labels, a, is_ood)
    return calibration.make_records(model.predict_proba(ds.features), labels, None, is_ood)


def _check_dim(model, ds: Dataset, what: str):
    if ds.dim != model.n_features_in_:
        raise DataError(f"{what} has {ds.dim} features, checkpoint expects {model.n_features_in_}")


def _to_bits(rec: dict) -> dict:
    for key in ("output_entropy", "differential_entropy"):
        if rec.get(key) is not None:
            rec[key] = rec[key] / math.log(2)
    return rec


def _scale_report(rep: dict, factor: float) -> dict:
    for group in ("in_dist", "ood"):
        for stats in rep.get(group, {}).values():
            if isinstance(stats, dict) and "median" in stats:
                stats["mean"] *= factor
                stats["median"] *= factor
                stats["histogram"]["edges"] = [e * factor for e in stats["histogram"]["edges"]]
    return rep


def format_table(rows) -> str:
    lines = [f"{'Method':<10}  {'Test Accuracy':>13}  {'ECE (M=15)':>10}"]
    for r in rows:
        if r.get("status", "ok") != "ok":
            lines.append(f"{r['method']:<10}  {'FAILED':>13}  {'-':>10}  {r['status']}")
        else:
            lines.append(f"{r['method']:<10}  {100 * r['test_accuracy']:>12.2f}%  {100 * r['ece']:>9.2f}%")
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args.out)
    spec = cfg.cluster_spec()
    train, test = gen_clusters(spec, cfg.seed)
    lo, hi = feature_range(train)
    ood_x = gen_ood_test(lo, hi, cfg.ood_test_n, Rng(cfg.seed).stream(_OOD_TEST_STREAM), cfg.ood_margin)
    # OOD rows carry a placeholder label 0; they are never scored against it
    ood = Dataset(ood_x, np.zeros(len(ood_x), dtype=np.int64), spec.n_classes, train.mean, train.scale, "ood_test")
    save_csv(train, out / "train.csv")
    save_csv(test, out / "test.csv")
    save_csv(ood, out / "ood_test.csv")
    _write_json(
        out / "manifest.json",
        {
            "kind": "dataset",
            "seed": cfg.seed,
            "n_classes": spec.n_classes,
            "dim": spec.dim,
            "spec": spec.to_dict(),
            "ood_test": {"n": cfg.ood_test_n, "margin": cfg.ood_margin, "box_lo": lo.tolist(), "box_hi": hi.tolist()},
            "standardization": {"mean": train.mean.tolist(), "scale": train.scale.tolist()},
            "files": {"train": "train.csv", "test": "test.csv", "ood_test": "ood_test.csv"},
            "sizes": {"train": len(train), "test": len(test), "ood_test": len(ood)},
            "config": cfg.to_dict(),
        },
    )
    print(f"wrote {len(train)} train, {len(test)} test, {len(ood)} OOD points to {out}")
    return EXIT_OK


def _train(method: str, cfg: ExperimentConfig, train: Dataset, out: Path):
    if len(train) == 0:
        raise DataError("training data is empty")
    model = _build(method, cfg).fit(train.features, train.labels)
    if method == "ensemble":
        log = [dict(r, member=i) for i, m in enumerate(model.estimators_) for r in m.log_]
    else:
        log = model.log_
    _write_ndjson(out / "train_log.ndjson", log)
    save_model(out, model, method, train, cfg.to_dict())
    return model, log


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    train, dmf = load_split(args.data, "train")
    out = _out_dir(args.out)
    model, log = _train(cfg.method, cfg, train, out)
    _write_json(out / "manifest.json", {"kind": "train", "data": str(args.data), "data_manifest": dmf, "config": cfg.to_dict()})
    last = log[-1] if log else {"train_acc": float("nan"), "loss_nll": float("nan"), "loss_kl": float("nan")}
    print(
        f"{cfg.method}: final train accuracy {last['train_acc']:.4f}, "
        f"loss_nll {last['loss_nll']:.6f}, loss_kl {last['loss_kl']:.6f}"
    )
    return EXIT_OK


def evaluate(model, test: Dataset, ood: Dataset | None, bins: int):
    """Records and reports for one model. Returns a dict of artefacts."""
    recs = _records(model, test)
    ood_recs = _records(model, ood, is_ood=True) if ood is not None else None
    report = calibration.reliability_data(recs, bins)
    unc = calibration.uncertainty_report(recs, ood_recs)
    acc = float(np.mean([r.correct for r in recs]))
    return {"records": recs, "ood_records": ood_recs, "calibration": report, "uncertainty": unc, "accuracy": acc}


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model, meta = load_model(args.checkpoint)
    k = meta["n_classes"]
    test, _ = load_split(args.data, "test", k)
    _check_dim(model, test, "data")
    ood = None
    if args.ood:
        ood, _ = load_split(args.ood, "ood_test", k)
        _check_dim(model, ood, "OOD data")
    out = _out_dir(args.out)
    res = evaluate(model, test, ood, cfg.bins)
    rows = [r.to_dict() for r in res["records"] + (res["ood_records"] or [])]
    unc = res["uncertainty"]
    if cfg.bits:
        rows = [_to_bits(r) for r in rows]
        unc = _scale_report(unc, 1 / math.log(2))
    unc["units"] = "bits" if cfg.bits else "nats"
    _write_ndjson(out / "predictions.ndjson", rows)
    (out / "calibration.json").write_text(res["calibration"].to_json() + "\n")
    (out / "calibration.csv").write_text(res["calibration"].to_csv())
    _write_json(out / "uncertainty.json", unc)
    summary = {"method": meta["method"], "test_accuracy": res["accuracy"], "ece": res["calibration"].ece, "bins": cfg.bins}
    summary["ood_auroc"] = unc.get("separation")
    _write_json(
        out / "manifest.json",
        {"kind": "eval", "checkpoint": str(args.checkpoint), "data": str(args.data), "ood": args.ood,
         "summary": summary, "config": cfg.to_dict()},
    )
    print(format_table([summary]).replace("M=15", f"M={cfg.bins}"), end="")
    if summary["ood_auroc"]:
        for key, v in summary["ood_auroc"].items():
            print(f"{key}: {v:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigurationError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
    train, dmf = load_split(args.data, "train")
    test, _ = load_split(args.data, "test", train.n_classes)
    out = _out_dir(args.out)
    rows, code = [], EXIT_OK
    for method in methods:
        try:
            mcfg = ExperimentConfig(**dict(cfg.to_dict(), method=method)).validate()
            model, _ = _train(method, mcfg, train, _out_dir(out / method))
            res = evaluate(model, test, None, cfg.bins)
            rows.append({"method": method, "test_accuracy": res["accuracy"], "ece": res["calibration"].ece, "status": "ok"})
        except (TrainingError, DomainError, ConfigurationError, DataError) as exc:
            rows.append({"method": method, "status": f"{type(exc).__name__}: {exc}"})
            code = max(code, _exit_code(exc))
    text = format_table(rows).replace("M=15", f"M={cfg.bins}")
    (out / "table.txt").write_text(text)
    _write_json(out / "table.json", {"columns": ["Test Accuracy", f"ECE (M={cfg.bins})"], "rows": rows})
    _write_json(out / "manifest.json", {"kind": "compare", "data": str(args.data), "methods": methods,
                                        "data_manifest": dmf, "config": cfg.to_dict()})
    print(text, end="")
    return code


# ---------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_training_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--config", help="JSON file with ExperimentConfig keys")
    g.add_argument("--seed", type=int)
    g.add_argument("--hidden-sizes", dest="hidden_sizes", type=lambda s: [int(v) for v in s.split(",")],
                   help="comma-separated widths, e.g. 64,64")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--kl-weight", dest="kl_weight", type=float)
    g.add_argument("--kl-warmup-epochs", dest="kl_warmup_epochs", type=int)
    g.add_argument("--ood-points", dest="ood_points_per_batch", type=int)
    g.add_argument("--ood-std", dest="ood_std", type=float)
    g.add_argument("--alpha-head", dest="alpha_head", choices=["softplus", "exp"])
    g.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    g.add_argument("--size", dest="ensemble_size", type=int, help="ensemble members")
    g.add_argument("--passes", dest="mc_passes", type=int, help="MC-dropout passes")
    g.add_argument("--bins", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dirichlet-fvi", description="Dirichlet fELBO classifiers and calibration reports.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the overlap cluster benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--n-per-class", dest="n_per_class", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--overlap-gap", dest="overlap_gap", type=float)
    p.add_argument("--spread", type=float)
    p.add_argument("--ood-test-n", dest="ood_test_n", type=int)
    p.add_argument("--ood-margin", dest="ood_margin", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one method")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--data", required=True, help="data dir, its manifest.json, or a CSV")
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="data dir (uses test.csv) or a CSV")
    p.add_argument("--ood", help="OOD CSV or data dir (uses ood_test.csv)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--bins", type=int)
    p.add_argument("--bits", action="store_const", const=True, help="report entropies in bits")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train and score several methods on shared data")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_compare)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigurationError):
        return EXIT_USAGE
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (TrainingError, DomainError, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigurationError, DataError, OSError, TrainingError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
