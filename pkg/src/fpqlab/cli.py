"""Command-line front end: ``fpqlab train|eval|probe|ablate|prepare-data``.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 divergence or
failed ablation cells.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as data_mod
from . import trainer as tr
from .checkpoint import CheckpointError
from .perturbation import (
    PerturbPolicy,
    estimate_accumulated_bias,
    linear_fixture,
    square_fixture,
)
from .probes import (
    MAX_EXACT_PARAMS,
    exact_hessian_trace,
    grad_norm_trajectory,
    hutchinson_trace,
    stability_probe,
    student_loss_closure,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
PROBE_KINDS = ("trace", "gradnorm", "stability", "bias")

log = logging.getLogger("fpqlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(tr.TrainConfig)}


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(key: str, value):
    kind = _FIELDS[key].type
    if kind in ("bool", bool):
        return value if isinstance(value, bool) else _parse_bool(value)
    if kind in ("int", int):
        return int(value)
    if kind in ("float", float):
        return float(value)
    return str(value)


def _unknown(keys) -> None:
    if keys:
        raise UsageError(f"unknown config key(s) {sorted(keys)}; valid keys: {', '.join(sorted(_FIELDS))}")


def read_config_file(path) -> dict:
    """Flat key/value settings from an INI file or a run manifest (JSON)."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        values = doc.get("config", doc)
    else:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(path.read_text())
        except configparser.Error as exc:
            raise UsageError(f"{path}: {exc}") from exc
        values = {}
        for section in cp.sections():
            for key, val in cp.items(section):
                values[key.replace("-", "_")] = val
    _unknown(set(values) - set(_FIELDS))
    try:
        return {k: _convert(k, v) for k, v in values.items()}
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def resolve_config(config_path=None, overrides: dict | None = None) -> tr.TrainConfig:
    """Defaults, then the config file, then command-line overrides."""
    values = read_config_file(config_path) if config_path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    _unknown(set(values) - set(_FIELDS))
    try:
        return tr.TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training settings (override the config file)")
    for name, f in _FIELDS.items():
        kind = f.type
        conv = {"bool": _parse_bool, "int": int, "float": float}.get(kind if isinstance(kind, str) else kind.__name__, str)
        g.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", type=conv, default=None,
                       metavar=name.upper(), help=f"default {f.default!r}")


def _overrides(args) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _run_dir(out_root: Path, cfg: tr.TrainConfig) -> Path:
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = out_root / f"{stamp}-{cfg.digest()[:8]}"
    cand, k = base, 1
    while cand.exists():
        cand = Path(f"{base}-{k}")
        k += 1
    cand.mkdir(parents=True)
    return cand


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _data_hint(exc: Exception) -> str:
    return (f"data error: {exc}\n"
            f"hint: pass --data-root or set {data_mod.ENV_ROOT}; "
            "`fpqlab prepare-data --root DIR` writes the MNIST sample bundled with mlxtend")


def _teacher(cfg: tr.TrainConfig, train_ds, run_dir: Path | None, cache_dir):
    teacher = tr.train_teacher(cfg, train_ds, cache_dir or None)
    if run_dir is not None:
        tr.save_model(run_dir / "teacher.fpq", teacher)
    return teacher


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    resume = Path(args.resume) if args.resume else None
    if resume is not None:
        from .checkpoint import load as load_ckpt

        cfg = tr.TrainConfig.from_dict(load_ckpt(resume).meta["config"])
        run_dir = resume.parent
    else:
        cfg = resolve_config(args.config, _overrides(args))
        run_dir = _run_dir(Path(args.out), cfg)
    train_ds, test_ds = tr.load_data(cfg)
    manifest_path = run_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if resume and manifest_path.exists() else {}
    manifest.update({
        "config": cfg.to_dict(),
        "version": __version__,
        "dataset_hashes": data_mod.file_digest(train_ds.files + test_ds.files),
        "seed": cfg.seed,
        "started": manifest.get("started", _now()),
        "finished": None,
    })
    _write_json(manifest_path, manifest)
    if resume is not None and (run_dir / "teacher.fpq").exists():
        teacher = tr.load_model(run_dir / "teacher.fpq")[0]
    else:
        teacher = _teacher(cfg, train_ds, run_dir, args.cache_dir)
    student = tr.build_student(cfg, train_ds.images.shape[1], train_ds.num_classes)
    if resume is None:
        student.copy_weights_from(teacher)
    state = tr.train(student, teacher, cfg, train_ds, test_ds, run_dir, resume=resume)
    manifest["finished"] = _now()
    manifest["final_acc"] = round(state.final_acc, 6)
    _write_json(manifest_path, manifest)
    print(f"run_dir {run_dir}")
    print(f"final_acc {state.final_acc:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, ck = tr.load_model(args.checkpoint)
    cfg = ck.meta.get("config", {})
    name = args.dataset or cfg.get("dataset", "mnist")
    root = args.data_root or cfg.get("data_root") or None
    ds = data_mod.load(name, root, args.split)
    acc = tr.evaluate(model, ds, args.batch_size)
    print(f"accuracy {acc:.6f}")
    return EXIT_OK


def _probe_data(args, ck_meta: dict):
    cfg = ck_meta.get("config", {})
    name = args.dataset or cfg.get("dataset", "mnist")
    root = args.data_root or cfg.get("data_root") or None
    return data_mod.load(name, root, args.split)


def cmd_probe(args) -> int:
    kind = args.kind
    report: dict = {"kind": kind, "version": __version__, "seed": args.seed}
    if kind == "bias" and args.checkpoint is None:
        net = square_fixture(args.a, args.layers) if args.fixture == "square" else linear_fixture(args.a)
        x = np.full((1,), args.x, dtype=np.float32)
        policy = PerturbPolicy(p=args.p, seed=args.seed)
        rep = estimate_accumulated_bias(net, x, policy, args.trials)
        report.update(rep.to_dict())
        report.update({"fixture": args.fixture, "a": args.a, "expected": args.a**2 / 3 if args.fixture == "square" and args.layers == 1 else None})
    else:
        if args.checkpoint is None:
            raise UsageError(f"probe {kind} needs --checkpoint")
        model, ck = tr.load_model(args.checkpoint)
        ds = _probe_data(args, ck.meta)
        n = min(args.samples, len(ds))
        x, y = ds.images[:n], ds.labels[:n]
        report["checkpoint"] = str(args.checkpoint)
        if kind == "trace":
            teacher_path = Path(args.checkpoint).parent / "teacher.fpq"
            teacher = tr.load_model(teacher_path)[0] if teacher_path.exists() and not args.ce_only else None
            cfgd = ck.meta.get("config", {})
            twin = model.smooth_twin().eval() if model.quantized or model.activation == "relu" else model.eval()
            closure = student_loss_closure(twin, x, y, teacher, csd_weight=cfgd.get("csd_weight", 1.0),
                                           reduction=cfgd.get("csd_reduction", "mean"))
            params = twin.weight_tensors()
            est = hutchinson_trace(closure, params, args.probes, args.seed)
            report.update(est.to_dict())
            report["loss"] = "total" if teacher is not None else "ce"
            report["parameters"] = "all conv/linear weights and biases of the smooth twin"
            report["num_params"] = int(sum(p.size for p in params))
            if args.exact:
                report["exact"] = exact_hessian_trace(closure, params, max_params=MAX_EXACT_PARAMS)
        elif kind == "gradnorm":
            batches = []
            epoch = 0
            while len(batches) < args.batches:
                for b in data_mod.batch_iter(ds, args.batch_size, args.seed, epoch):
                    batches.append(b)
                    if len(batches) == args.batches:
                        break
                epoch += 1
            series = grad_norm_trajectory(model, batches, args.mode, p=args.p, seed=args.seed)
            report.update({"mode": args.mode, "p": args.p, "series": series, "mean": float(np.mean(series))})
        elif kind == "stability":
            sigma = args.sigma * float(np.std(x)) if args.relative else args.sigma
            rep = stability_probe(model, x, sigma, args.trials, args.seed)
            report.update(rep.to_dict())
        else:  # bias on a trained model
            model.train()
            policy = PerturbPolicy(p=args.p, seed=args.seed)
            rep = estimate_accumulated_bias(model, x, policy, args.trials)
            report.update(rep.to_dict())
    out = Path(args.out) if args.out else (
        Path(args.checkpoint).parent / f"probe-{kind}.json" if args.checkpoint else Path(f"probe-{kind}.json"))
    _write_json(out, report)
    for key in ("mean", "stderr", "exact", "variance"):
        if report.get(key) is not None:
            print(f"{key} {report[key]:.6f}")
    if kind == "bias":
        print(f"output_bias {np.linalg.norm(report['output_bias']):.6f}")
        print(f"significant {str(report['significant']).lower()}")
    print(f"report {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = resolve_config(args.config, _overrides(args))
    if args.grid == "perturb-csd":
        grid = tr.perturb_csd_grid(base.p if base.p > 0 else 0.1)
    else:
        ps = [float(v) for v in args.ps.split(",")] if args.ps else [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]
        grid = tr.p_sweep_grid(ps, base.csd_weight)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    out = _run_dir(Path(args.out), base)
    train_ds, test_ds = tr.load_data(base)
    _write_json(out / "manifest.json", {"config": base.to_dict(), "grid": grid, "seeds": seeds,
                                        "version": __version__, "started": _now(),
                                        "dataset_hashes": data_mod.file_digest(train_ds.files + test_ds.files)})
    report = tr.ablate(grid, base, train_ds, test_ds, seeds=seeds,
                       teacher_for=lambda c: tr.train_teacher(c, train_ds, args.cache_dir or out / "teachers"),
                       out_dir=out / "cells")
    (out / "ablation.csv").write_text(report.to_csv())
    (out / "ablation.txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    print(f"run_dir {out}")
    return EXIT_DIVERGED if report.failed else EXIT_OK


def cmd_prepare_data(args) -> int:
    root = data_mod.materialize_mnist_subset(args.root)
    print(f"wrote MNIST sample under {root / 'mnist'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fpqlab", description="Quantization-aware training lab with feature perturbation.")
    parser.add_argument("--version", action="version", version=f"fpqlab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="calibrate and fine-tune a quantized student")
    p.add_argument("--config", help="INI config or a run manifest (JSON)")
    p.add_argument("--out", default="runs", help="directory for run directories")
    p.add_argument("--resume", help="continue from a checkpoint.fpq written by an earlier run")
    p.add_argument("--cache-dir", default="", help="reuse trained teachers from this directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--data-root")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--batch-size", type=int, default=500)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="landscape and bias probes; writes a JSON report")
    p.add_argument("kind", choices=PROBE_KINDS)
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="report path (default next to the checkpoint)")
    p.add_argument("--dataset")
    p.add_argument("--data-root")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--samples", type=int, default=100, help="examples in the probe batch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=100, help="Hutchinson probe count")
    p.add_argument("--exact", action="store_true", help="also compute the finite-difference trace")
    p.add_argument("--ce-only", action="store_true", help="trace of CE even if a teacher is present")
    p.add_argument("--mode", default="feature-perturb", choices=("none", "feature-perturb", "weight-perturb"))
    p.add_argument("--batches", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--relative", action="store_true", help="sigma is a fraction of the input std")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--fixture", default="square", choices=("square", "linear"))
    p.add_argument("--a", type=float, default=0.5, help="fixture noise half-width")
    p.add_argument("--x", type=float, default=0.7, help="fixture input value")
    p.add_argument("--layers", type=int, default=1, help="fixture depth")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="perturb x CSD grid or p sweep")
    p.add_argument("--config")
    p.add_argument("--grid", default="perturb-csd", choices=("perturb-csd", "p-sweep"))
    p.add_argument("--ps", help="comma-separated p values for the sweep")
    p.add_argument("--seeds", help="comma-separated seeds; accuracy is averaged")
    p.add_argument("--out", default="runs")
    p.add_argument("--cache-dir", default="")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("prepare-data", help="write the bundled MNIST sample as IDX files")
    p.add_argument("--root", required=True)
    p.set_defaults(func=cmd_prepare_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except data_mod.DataError as exc:
        print(_data_hint(exc), file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except tr.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
