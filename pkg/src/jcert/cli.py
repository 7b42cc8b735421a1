"""Batch command-line front end: train, certify, sweep, oracle, merge, cluster.

Every command is deterministic given its flags, the seed, and the input
files.  Output files are written atomically (temp file + rename), so a
failing run leaves no partial outputs.  Exit codes: 0 success, 2 usage or
configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataio, ensemble, netcore, oracle, training
from .bounds import LINF, PerturbationSpec, certify_single
from .dataio import Dataset, SweepRow
from .ensemble import EnsembleSpec
from .netcore import forward, load_model, merge_average, predict, save_model
from .training import CostMatrix, TrainConfig, TrainingDiverged, cost_matrix_presets


class ConfigError(Exception):
    """Bad flags or unusable input files; maps to exit code 2."""


def _parse_data(src: str, split: str, limit: int | None) -> Dataset:
    if src.startswith("synthetic:"):
        params = {}
        for item in src[len("synthetic:"):].split(","):
            if not item:
                continue
            key, _, value = item.partition("=")
            params[key.strip()] = value.strip()
        try:
            ds = dataio.synthetic_blobs(
                num_classes=int(params.get("classes", 3)),
                dims=int(params.get("dims", 2)),
                n=int(params.get("n", 50)),
                seed=int(params.get("seed", 0)),
                separation=float(params.get("sep", 6.0)),
                split=split,
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad synthetic data spec {src!r}: {exc}") from exc
    elif src.startswith("idx:"):
        spec = src[len("idx:"):]
        if "," in spec:
            images, labels = spec.split(",", 1)
        elif os.path.isdir(spec):
            prefix = "train" if split == "train" else "t10k"
            images = os.path.join(spec, f"{prefix}-images-idx3-ubyte")
            labels = os.path.join(spec, f"{prefix}-labels-idx1-ubyte")
        else:
            raise ConfigError(f"idx source {spec!r} is neither a directory nor a file pair")
        try:
            ds = dataio.load_idx(images, labels, split=split)
        except (OSError, dataio.IdxFormatError) as exc:
            raise ConfigError(f"cannot load idx data: {exc}") from exc
    else:
        raise ConfigError(
            f"unknown data source {src!r}; use 'idx:...' or 'synthetic:...'"
        )
    if limit is not None:
        ds = ds.subset(limit)
    if len(ds) == 0:
        raise ConfigError("data source produced an empty dataset")
    return ds


def _parse_cost_matrix(spec: str, classes: int) -> CostMatrix:
    if spec.startswith("preset:"):
        body = spec[len("preset:"):]
        kind, _, rest = body.partition(":")
        try:
            if kind == "overall":
                return cost_matrix_presets("overall", classes=classes)
            if kind in ("seed-set", "target-set"):
                members = [int(v) for v in rest.split(",") if v != ""]
                return cost_matrix_presets(kind, members, classes=classes)
            if kind in ("seed-modulo", "target-modulo"):
                modulus, residue = rest.split(",")
                return cost_matrix_presets(kind, (int(modulus), int(residue)), classes=classes)
        except ValueError as exc:
            raise ConfigError(f"bad cost-matrix preset {spec!r}: {exc}") from exc
        raise ConfigError(f"unknown cost-matrix preset kind {kind!r}")
    try:
        return CostMatrix.load(spec)
    except OSError as exc:
        raise ConfigError(f"cannot read cost matrix {spec!r}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad cost matrix file {spec!r}: {exc}") from exc


def _load_models(arg: str) -> list[netcore.Network]:
    paths = [p for p in arg.split(",") if p]
    if not paths:
        raise ConfigError("no model paths given")
    models = []
    for path in paths:
        try:
            models.append(load_model(path))
        except OSError as exc:
            raise ConfigError(f"cannot read model {path!r}: {exc}") from exc
        except netcore.ModelFormatError as exc:
            raise ConfigError(f"bad model file {path!r}: {exc}") from exc
    return models


def _model_columns(arg: str) -> list[str]:
    names = []
    for path in arg.split(","):
        if not path:
            continue
        stem = os.path.splitext(os.path.basename(path))[0]
        name = stem
        i = 2
        while name in names:
            name = f"{stem}_{i}"
            i += 1
        names.append(name)
    return names


def _jobs(args) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    env = os.environ.get("JCERT_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"bad JCERT_JOBS value {env!r}") from exc
    return 1


def _parse_eps_grid(spec: str) -> list[float]:
    parts = spec.split(":")
    if len(parts) != 3:
        raise ConfigError("--eps grid must look like start:stop:step")
    start, stop, step = (float(p) for p in parts)
    if step <= 0 or stop < start:
        raise ConfigError("--eps grid needs step > 0 and stop >= start")
    grid = []
    k = 0
    while True:
        val = round(start + k * step, 12)
        if val > stop + 1e-12:
            break
        grid.append(val)
        k += 1
    return grid


def cmd_train(args) -> int:
    ds = _parse_data(args.data, "train", args.limit)
    classes = args.classes if args.classes else ds.num_classes
    if ds.num_classes > classes:
        raise ConfigError(
            f"dataset has {ds.num_classes} classes, above --classes {classes}"
        )
    cost = _parse_cost_matrix(args.cost_matrix, classes)
    hidden = tuple(int(h) for h in args.hidden.split(",") if h)
    cfg = TrainConfig(eps_train=args.eps, epochs=args.epochs, batch_size=args.batch_size,
                      lr=args.lr, lam=args.lam, seed=args.seed, hidden=hidden)
    net, log = training.train(ds, cost, cfg)
    save_model(net, args.out)
    log_path = args.log or (os.path.splitext(args.out)[0] + "_log.csv")
    log.to_csv(log_path)
    print(f"trained model -> {args.out} (log -> {log_path})")
    return 0


def _certify_spec(args) -> PerturbationSpec:
    return PerturbationSpec(LINF, args.eps)


def cmd_certify(args) -> int:
    models = _load_models(args.models)
    ds = _parse_data(args.data, args.split, args.limit)
    ens = EnsembleSpec(tuple(models), args.mode)
    report = ensemble.evaluate(ens, ds, _certify_spec(args), method=args.method,
                               jobs=_jobs(args))
    if args.out:
        dataio.emit_report(report, args.out)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "per_input"}))
    return 0


def cmd_sweep(args) -> int:
    models = _load_models(args.models)
    columns = _model_columns(args.models) + ["independent", "averaging"]
    ds = _parse_data(args.data, args.split, args.limit)
    grid = _parse_eps_grid(args.eps)
    merged = merge_average(models)
    X = ds.inputs
    y = ds.labels
    preds = np.array([[predict(m, x) for m in models] for x in X])
    avg_pred = np.array([predict(merged, x) for x in X])
    unanimous_ok = np.array(
        [bool(np.all(preds[i] == y[i])) for i in range(len(X))]
    )
    rows = []
    for eps in grid:
        spec = PerturbationSpec(LINF, eps)
        counts = {c: 0 for c in columns}
        for i in range(len(X)):
            per_model = [
                certify_single(m, X[i], int(y[i]), spec, args.method).certified
                for m in models
            ]
            for name, ok in zip(columns, per_model):
                counts[name] += int(ok)
            if unanimous_ok[i] and any(per_model):
                counts["independent"] += 1
            if avg_pred[i] == y[i]:
                merged_cert = certify_single(merged, X[i], int(y[i]), spec, args.method)
                counts["averaging"] += int(merged_cert.certified)
        rows.append(SweepRow(eps, counts, "bound"))
    dataio.emit_sweep_csv(rows, args.out, columns=columns)
    print(f"sweep over {len(grid)} radii -> {args.out}")
    return 0


def cmd_oracle(args) -> int:
    models = _load_models(args.models)
    ds = _parse_data(args.data, args.split, None)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"--index {args.index} out of range for {len(ds)} inputs")
    x = ds.inputs[args.index]
    label = args.label if args.label is not None else int(ds.labels[args.index])
    query, _, param = args.query.partition(":")
    try:
        if query == "minimal":
            res = oracle.minimal_perturbation(models[0], x, label, args.norm,
                                              cap=args.cap, timeout=args.timeout)
        elif query == "targeted":
            if args.eps is None:
                raise ConfigError("targeted queries need --eps")
            spec = PerturbationSpec(args.norm, args.eps)
            res = oracle.exact_verify(models[0], x, label, int(param), spec,
                                      cap=args.cap, timeout=args.timeout)
        elif query == "unanimous":
            if args.eps is None:
                raise ConfigError("unanimous queries need --eps")
            spec = PerturbationSpec(args.norm, args.eps)
            res = oracle.exact_unanimous_adversary(models, x, label, int(param), spec,
                                                   cap=args.cap, timeout=args.timeout)
        else:
            raise ConfigError(f"unknown oracle query {args.query!r}")
    except oracle.OracleCapError as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    payload = json.dumps(res.to_dict(), indent=2)
    if args.out:
        netcore.atomic_write_text(args.out, payload)
    print(payload)
    return 0


def cmd_merge(args) -> int:
    models = _load_models(args.models)
    merged = merge_average(models)
    save_model(merged, args.out)
    print(f"merged {len(models)} models -> {args.out}")
    return 0


def cmd_cluster(args) -> int:
    net = _load_models(args.model)[0]
    ds = _parse_data(args.data, args.split, args.limit)
    try:
        result = training.adversarial_cluster(net, args.k, ds, args.norm,
                                              samples_per_class=args.samples,
                                              cap=args.cap, timeout=args.timeout)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for group in result.groups:
        print("group:", " ".join(str(c) for c in group))
    print("confusability:")
    for row in result.confusability:
        print(" ".join(f"{v:.4f}" for v in row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jcert",
        description="Certify joint adversarial robustness of small ReLU-network ensembles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common_data(p, default_split):
        p.add_argument("--data", required=True,
                       help="data source: idx:<dir|images,labels> or synthetic:k=v,...")
        p.add_argument("--split", default=default_split, choices=["train", "test"])
        p.add_argument("--limit", type=int, default=None, help="use only the first N items")

    p = sub.add_parser("train", help="cost-sensitive robust training")
    add_common_data(p, "train")
    p.add_argument("--cost-matrix", required=True, help="file path or preset:<spec>")
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--hidden", default="64,64")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="evaluate joint certification over a dataset")
    add_common_data(p, "test")
    p.add_argument("--models", required=True, help="comma-separated model files")
    p.add_argument("--mode", required=True, choices=list(ensemble.MODES))
    p.add_argument("--method", default="dual", choices=["ibp", "dual"])
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("sweep", help="certified counts over a radius grid")
    add_common_data(p, "test")
    p.add_argument("--models", required=True)
    p.add_argument("--method", default="dual", choices=["ibp", "dual"])
    p.add_argument("--eps", default="0.01:0.20:0.01", help="grid start:stop:step")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="complete verification queries on tiny models")
    add_common_data(p, "test")
    p.add_argument("--models", "--model", dest="models", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--label", type=int, default=None)
    p.add_argument("--norm", default="linf", choices=["linf", "l1"])
    p.add_argument("--query", required=True,
                   help="minimal | targeted:<class> | unanimous:<class>")
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--timeout", type=float, default=240.0)
    p.add_argument("--cap", type=int, default=24)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("merge", help="write the averaged-ensemble network")
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("cluster", help="adversarial clustering of classes")
    add_common_data(p, "train")
    p.add_argument("--model", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--norm", default="linf", choices=["linf", "l1"])
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--cap", type=int, default=24)
    p.set_defaults(func=cmd_cluster)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"jcert: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"jcert: training diverged: {exc}", file=sys.stderr)
        return 3
    except (RuntimeError, ArithmeticError) as exc:
        print(f"jcert: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
