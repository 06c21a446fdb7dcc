"""Quantization-aware fine-tuning with stochastic feature noise and CSD.

One training step:

1. student forward with taps, feature noise on conv inputs (per-layer coin)
2. teacher forward with taps (frozen, full precision, no noise)
3. loss = CE(student) + csd_weight * CSD(student taps, teacher taps)
4. backward; SGD with momentum updates weights and quantizer scales;
   scales are floored at 1e-8; the cosine schedule advances.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import data as data_mod
from .autodiff import NonFiniteError, Tensor, backward, no_grad
from .distillation import LayerTap, total_loss
from .models import ARCHS, LayeredModel, build
from .perturbation import PerturbPolicy
from .probes import stability_probe, student_trace
from .quantizer import CalibrationError, QuantizedLayerConfig

log = logging.getLogger("fpqlab")

VALID_BITS = (2, 4, 8)
CIFAR_DESK_SUBSET = 5000


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float, checkpoint: Path | None):
        where = f"; state saved to {checkpoint}" if checkpoint else ""
        super().__init__(f"training diverged at step {step} (loss {loss!r}){where}")
        self.step = step
        self.loss = loss
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    # model
    arch: str = "toy-cnn"
    wbits: int = 4
    abits: int = 4
    first_last_8bit: bool = True
    perturb_first: bool = True
    symmetric_weights: bool = False
    zero_from_min: bool = False
    # data
    dataset: str = "mnist"
    data_root: str = ""
    train_subset: int = 0
    full_cifar: bool = False
    calib_size: int = 100
    augment: bool = True
    # optimization
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    scale_lr_mult: float = 1.0
    batch_size: int = 128
    epochs: int = 30
    # perturbation and distillation
    p: float = 0.1
    csd_weight: float = 1.0
    csd_reduction: str = "mean"
    csd_eps: float = 1e-5
    # teacher
    teacher_epochs: int = 15
    teacher_lr: float = 0.1
    # probes
    trace_every: int = 1
    trace_probes: int = 10
    gradnorm_every: int = 10
    stability_sigma: float = 0.05
    stability_trials: int = 10
    # run
    seed: int = 0
    eval_batch_size: int = 500
    divergence_threshold: float = 1e4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.dataset not in data_mod.DATASETS:
            raise ValueError(f"dataset must be one of {data_mod.DATASETS}, got {self.dataset!r}")
        for name in ("wbits", "abits"):
            if getattr(self, name) not in VALID_BITS:
                raise ValueError(f"{name} must be one of {VALID_BITS}, got {getattr(self, name)}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"perturbation probability p must lie in [0, 1], got {self.p}")
        for name in ("lr", "teacher_lr", "csd_eps", "divergence_threshold", "scale_lr_mult"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        for name in ("weight_decay", "csd_weight", "stability_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("batch_size", "epochs", "calib_size", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("train_subset", "teacher_epochs", "trace_every", "trace_probes", "gradnorm_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.csd_reduction not in ("sum", "mean"):
            raise ValueError(f"csd_reduction must be 'sum' or 'mean', got {self.csd_reduction!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys {sorted(unknown)}; valid keys: {sorted(known)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def qconfig(self) -> QuantizedLayerConfig:
        return QuantizedLayerConfig(self.wbits, self.abits, self.first_last_8bit,
                                    self.symmetric_weights, self.zero_from_min)

    def resolved_subset(self) -> int | None:
        if self.train_subset > 0:
            return self.train_subset
        if self.dataset.startswith("cifar") and not self.full_cifar:
            return CIFAR_DESK_SUBSET
        return None


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total)) / 2."""
    if total <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


class SGD:
    """SGD with heavy-ball momentum, per-group L2 weight decay and lr multiplier."""

    def __init__(self, groups: Sequence[dict], momentum: float = 0.9):
        self.groups = [{"name": g.get("name", f"group{i}"), "params": list(g["params"]),
                        "weight_decay": float(g.get("weight_decay", 0.0)),
                        "lr_mult": float(g.get("lr_mult", 1.0))}
                       for i, g in enumerate(groups)]
        self.momentum = momentum
        self.buffers: list[np.ndarray | None] = [None] * sum(len(g["params"]) for g in self.groups)

    def _params(self):
        for g in self.groups:
            for p in g["params"]:
                yield g, p

    def zero_grad(self) -> None:
        for _, p in self._params():
            p.grad = None

    def step(self, lr: float) -> None:
        for i, (g, p) in enumerate(self._params()):
            if p.grad is None:
                continue
            d = p.grad.astype(np.float32)
            if g["weight_decay"]:
                d = d + np.float32(g["weight_decay"]) * p.data
            buf = self.buffers[i]
            buf = d if buf is None else np.float32(self.momentum) * buf + d
            self.buffers[i] = buf
            p.data -= np.float32(lr * g["lr_mult"]) * buf

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"opt.{i}": b for i, b in enumerate(self.buffers) if b is not None}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for i in range(len(self.buffers)):
            b = arrays.get(f"opt.{i}")
            self.buffers[i] = None if b is None else b.astype(np.float32).copy()


def make_optimizer(student: LayeredModel, cfg: TrainConfig) -> SGD:
    return SGD(
        [
            {"name": "weights", "params": student.parameters(), "weight_decay": cfg.weight_decay},
            {"name": "scales", "params": student.scale_tensors(), "weight_decay": 0.0,
             "lr_mult": cfg.scale_lr_mult},
        ],
        cfg.momentum,
    )


# ---------------------------------------------------------------------------
# data, calibration, teacher
# ---------------------------------------------------------------------------

def load_data(cfg: TrainConfig):
    root = cfg.data_root or None
    train = data_mod.load(cfg.dataset, root, "train", subset=cfg.resolved_subset(), subset_seed=cfg.seed)
    test = data_mod.load(cfg.dataset, root, "test")
    return train, test


def calibrate_model(student: LayeredModel, calib) -> list[str]:
    """Initialize every quantizer once: weights from their values, activations
    from min/max over one full-precision pass on the calibration images.

    Returns the degenerate-calibration warnings raised along the way.
    """
    quantizers = [q for _, q in student.quantizers()]
    if not quantizers:
        raise CalibrationError("model has no quantizers; build it with quantized=True")
    if any(q.calibrated for q in quantizers):
        raise CalibrationError("model already calibrated; zero-points are frozen")
    images = calib.images if hasattr(calib, "images") else np.asarray(calib)
    if len(images) == 0:
        raise CalibrationError("calibration set is empty")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        was_training = student.training
        student.eval()
        for layer in student.layers:
            layer.weight_quant.enabled = False
            layer.act_quant.observing = True
        try:
            with no_grad():
                student(images)
        finally:
            for layer in student.layers:
                layer.weight_quant.enabled = True
                layer.act_quant.observing = False
            student.train(was_training)
        for layer in student.layers:
            layer.weight_quant.calibrate(layer.weight)
            layer.act_quant.finish_observing()
    messages = [str(w.message) for w in caught]
    for m in messages:
        log.warning("calibration: %s", m)
    return messages


def zero_point_hash(model: LayeredModel) -> str:
    h = hashlib.sha256()
    for name, q in model.quantizers():
        if q.spec is not None:
            h.update(name.encode())
            h.update(q.spec.zero_point.tobytes())
    return h.hexdigest()


def evaluate(model: LayeredModel, ds, batch_size: int = 500, policy: PerturbPolicy | None = None) -> float:
    """Top-1 accuracy in evaluation mode; ``policy`` has no effect there."""
    was_training = model.training
    model.eval()
    correct = 0
    try:
        with no_grad():
            for x, y, _ in data_mod.batch_iter(ds, batch_size, shuffle=False):
                logits = model(x, policy)
                correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    finally:
        model.train(was_training)
    return correct / len(ds) if len(ds) else 0.0


def build_student(cfg: TrainConfig, in_channels: int, num_classes: int, **kw) -> LayeredModel:
    m = build(cfg.arch, num_classes, True, in_channels=in_channels, qconfig=cfg.qconfig(), seed=cfg.seed, **kw)
    m.perturb_first = cfg.perturb_first
    return m


def dataset_digest(ds) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.images).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def _teacher_key(cfg: TrainConfig, train) -> str:
    keys = ("arch", "seed", "teacher_epochs", "teacher_lr", "momentum", "weight_decay", "batch_size", "augment")
    blob = json.dumps({k: getattr(cfg, k) for k in keys}, sort_keys=True) + dataset_digest(train)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_model(path, model: LayeredModel, meta: dict | None = None, extra: dict | None = None) -> Path:
    arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
    arrays.update(extra or {})
    info = {"model": model.build_kwargs, "quantized": model.quantized,
            "qconfig": dataclasses.asdict(model.qconfig), "activation": model.activation,
            "perturb_first": model.perturb_first}
    info.update(meta or {})
    return ckpt_io.save(path, ckpt_io.Checkpoint(arrays, info))


def load_model(path) -> tuple[LayeredModel, ckpt_io.Checkpoint]:
    ck = ckpt_io.load(path)
    kw = dict(ck.meta["model"])
    arch, num_classes = kw.pop("arch"), kw.pop("num_classes")
    qconfig = QuantizedLayerConfig(**ck.meta["qconfig"])
    model = build(arch, num_classes, ck.meta["quantized"], qconfig=qconfig, **kw)
    model.activation = ck.meta.get("activation", model.activation)
    model.perturb_first = ck.meta.get("perturb_first", True)
    model.load_state_dict({k[len("model."):]: v for k, v in ck.arrays.items() if k.startswith("model.")})
    return model, ck


def train_teacher(cfg: TrainConfig, train, cache_dir=None) -> LayeredModel:
    """Full-precision CE training of the student architecture (cached by content)."""
    cache = None
    if cache_dir:
        cache = Path(cache_dir) / f"teacher-{_teacher_key(cfg, train)}.fpq"
        if cache.exists():
            return load_model(cache)[0]
    in_ch = train.images.shape[1]
    teacher = build(cfg.arch, train.num_classes, False, in_channels=in_ch, seed=cfg.seed)
    opt = SGD([{"params": teacher.parameters(), "weight_decay": cfg.weight_decay}], cfg.momentum)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.teacher_epochs * steps_per_epoch
    step = 0
    teacher.train()
    augment = cfg.augment and cfg.dataset.startswith("cifar")
    for epoch in range(cfg.teacher_epochs):
        for x, y, _ in data_mod.batch_iter(train, cfg.batch_size, cfg.seed + 10_000, epoch, augment=augment):
            loss, _ = total_loss(teacher(x), y)
            opt.zero_grad()
            backward(loss)
            opt.step(cosine_lr(step, total, cfg.teacher_lr))
            step += 1
        log.info("teacher epoch %d loss %.4f", epoch, loss.item())
    teacher.eval()
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        save_model(cache, teacher)
    return teacher


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    step: int
    epoch: int
    lr: float
    ce: float
    csd: float
    total: float
    acc: float
    grad_norm: float | None = None
    trace: float | None = None
    out_var: float | None = None

    def to_dict(self) -> dict:
        return {"kind": "step", **dataclasses.asdict(self)}


@dataclass
class RunState:
    step: int = 0
    epoch: int = 0
    best_acc: float = 0.0
    final_acc: float = 0.0
    history: list[dict] = field(default_factory=list)
    zp_hash: str = ""
    calibration_warnings: list[str] = field(default_factory=list)
    policy_state: dict | None = None
    metrics_lines: int = 0
    run_dir: Path | None = None
    stability: float | None = None

    def meta(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "best_acc": self.best_acc,
                "final_acc": self.final_acc, "history": self.history, "zp_hash": self.zp_hash,
                "calibration_warnings": self.calibration_warnings, "policy_state": self.policy_state,
                "metrics_lines": self.metrics_lines}


class MetricsWriter:
    def __init__(self, path: Path | None, keep_lines: int = 0):
        self.path = path
        self.lines = keep_lines
        self.records: list[dict] = []
        if path is not None:
            kept = []
            if keep_lines and path.exists():
                kept = path.read_text().splitlines()[:keep_lines]
            path.write_text("".join(line + "\n" for line in kept))

    def write(self, record: dict) -> None:
        self.records.append(record)
        self.lines += 1
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


SUMMARY_COLUMNS = ("epoch", "steps", "lr", "mean_ce", "mean_csd", "mean_total", "train_acc", "test_acc")


def summary_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for h in history:
        w.writerow([h["epoch"], h["steps"]] + [f"{h[c]:.6f}" for c in SUMMARY_COLUMNS[2:]])
    return buf.getvalue()


def _grad_norm(params: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))


def _save_state(path: Path, student, opt: SGD, state: RunState, cfg: TrainConfig) -> Path:
    return save_model(path, student, {"config": cfg.to_dict(), "run": state.meta()}, opt.state_arrays())


def train(
    student: LayeredModel,
    teacher: LayeredModel | None,
    cfg: TrainConfig,
    train_ds,
    test_ds=None,
    run_dir=None,
    *,
    calib=None,
    resume=None,
    stop_after_epochs: int | None = None,
    probe_batch=None,
    on_step: Callable[[MetricsRow], None] | None = None,
) -> RunState:
    """Fine-tune a calibrated (or calibrate-on-entry) student; see module docstring.

    ``resume`` is a checkpoint path written by an earlier call with the same
    config; training continues from its epoch and reproduces the remaining
    metrics exactly. ``stop_after_epochs`` ends the call early (for tests and
    interrupted runs).
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    if teacher is not None:
        teacher.eval()
    state = RunState(run_dir=run_dir)
    if resume is not None:
        ck = ckpt_io.load(resume)
        student.load_state_dict({k[len("model."):]: v for k, v in ck.arrays.items() if k.startswith("model.")})
        run = ck.meta["run"]
        state = RunState(run["step"], run["epoch"], run["best_acc"], run["final_acc"], list(run["history"]),
                         run["zp_hash"], list(run["calibration_warnings"]), run["policy_state"],
                         run["metrics_lines"], run_dir)
    else:
        if not all(q.calibrated for _, q in student.quantizers()):
            if calib is None:
                calib = data_mod.select_calibration(train_ds, min(cfg.calib_size, len(train_ds)), cfg.seed)
            state.calibration_warnings = calibrate_model(student, calib)
        state.zp_hash = zero_point_hash(student)

    if probe_batch is None:
        probe_src = calib if calib is not None else data_mod.select_calibration(
            train_ds, min(cfg.calib_size, len(train_ds)), cfg.seed)
        probe_batch = (probe_src.images, probe_src.labels)

    opt = make_optimizer(student, cfg)
    policy = PerturbPolicy(p=cfg.p, target="features" if cfg.p > 0 else "off", seed=cfg.seed)
    if resume is not None:
        opt.load_state_arrays(ck.arrays)
        if state.policy_state is not None:
            policy.set_state(state.policy_state)
    writer = MetricsWriter(run_dir / "metrics.jsonl" if run_dir else None, state.metrics_lines)
    use_csd = teacher is not None and cfg.csd_weight > 0
    steps_per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    augment = cfg.augment and cfg.dataset.startswith("cifar")
    scales = student.scale_tensors()
    weights = student.weight_tensors()
    student.train()

    for epoch in range(state.epoch, cfg.epochs):
        sums = {"ce": 0.0, "csd": 0.0, "total": 0.0, "correct": 0, "n": 0}
        lr = cfg.lr
        for x, y, _ in data_mod.batch_iter(train_ds, cfg.batch_size, cfg.seed, epoch, augment=augment):
            lr = cosine_lr(state.step, total_steps, cfg.lr)
            try:
                logits, s_taps = student.forward_with_taps(x, policy)
                taps = None
                if use_csd:
                    with no_grad():
                        _, t_taps = teacher.forward_with_taps(x)
                    taps = [LayerTap(i, s, t) for i, (s, t) in enumerate(zip(s_taps, t_taps))]
                loss, br = total_loss(logits, y, taps, cfg.csd_weight, cfg.csd_eps, cfg.csd_reduction)
                bad = not math.isfinite(br.total) or br.total > cfg.divergence_threshold
            except NonFiniteError:
                bad, br = True, None
            if bad:
                path = None
                if run_dir is not None:
                    state.policy_state = policy.get_state()
                    path = _save_state(run_dir / "diverged.fpq", student, opt, state, cfg)
                raise DivergenceError(state.step, br.total if br else float("nan"), path)
            opt.zero_grad()
            backward(loss)
            gnorm = _grad_norm(weights) if cfg.gradnorm_every and state.step % cfg.gradnorm_every == 0 else None
            opt.step(lr)
            for s in scales:
                np.maximum(s.data, 1e-8, out=s.data)
            acc = float(np.mean(np.argmax(logits.data, axis=1) == y))
            row = MetricsRow(state.step, epoch, lr, br.ce, br.csd, br.total, acc, gnorm)
            writer.write(row.to_dict())
            if gnorm is not None:
                writer.write({"kind": "probe", "probe": "gradnorm", "step": state.step, "value": gnorm,
                              "stderr": None})
            if on_step is not None:
                on_step(row)
            sums["ce"] += br.ce * len(y)
            sums["csd"] += br.csd * len(y)
            sums["total"] += br.total * len(y)
            sums["correct"] += int(acc * len(y) + 0.5)
            sums["n"] += len(y)
            state.step += 1

        if zero_point_hash(student) != state.zp_hash:
            raise RuntimeError(f"zero-points changed during epoch {epoch}")
        test_acc = evaluate(student, test_ds, cfg.eval_batch_size) if test_ds is not None else float("nan")
        n = max(sums["n"], 1)
        rec = {"epoch": epoch, "steps": state.step, "lr": lr, "mean_ce": sums["ce"] / n,
               "mean_csd": sums["csd"] / n, "mean_total": sums["total"] / n,
               "train_acc": sums["correct"] / n, "test_acc": test_acc}
        state.history.append(rec)
        writer.write({"kind": "epoch", "step": state.step, **rec, "zp_hash": state.zp_hash})
        if cfg.trace_every and (epoch + 1) % cfg.trace_every == 0 and cfg.trace_probes:
            est = student_trace(student, probe_batch[0], probe_batch[1], teacher if use_csd else None,
                                n_probes=cfg.trace_probes, seed=cfg.seed + epoch,
                                csd_weight=cfg.csd_weight, reduction=cfg.csd_reduction)
            writer.write({"kind": "probe", "probe": "trace", "step": state.step, "value": est.mean,
                          "stderr": est.stderr, "loss": "total" if use_csd else "ce"})
        state.epoch = epoch + 1
        state.final_acc = test_acc
        if math.isfinite(test_acc):
            state.best_acc = max(state.best_acc, test_acc)
        log.info("epoch %d ce %.4f csd %.4f test_acc %.4f", epoch, rec["mean_ce"], rec["mean_csd"], test_acc)
        state.policy_state = policy.get_state()
        state.metrics_lines = writer.lines
        if run_dir is not None:
            _save_state(run_dir / "checkpoint.fpq", student, opt, state, cfg)
        if stop_after_epochs is not None and state.epoch >= stop_after_epochs and state.epoch < cfg.epochs:
            return state

    if cfg.stability_sigma > 0 and cfg.stability_trials >= 2:
        x = probe_batch[0]
        rep = stability_probe(student, x, cfg.stability_sigma * float(np.std(x)), cfg.stability_trials, cfg.seed)
        state.stability = rep.variance
        writer.write({"kind": "probe", "probe": "stability", "step": state.step, "value": rep.variance,
                      "stderr": None, "sigma": rep.sigma})
    if run_dir is not None:
        (run_dir / "summary.csv").write_text(summary_csv(state.history))
    return state


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    label: str
    p: float
    csd_weight: float
    seeds: list[int]
    accuracies: list[float]
    status: str = "ok"
    error: str = ""

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies and self.status == "ok" else float("nan")


@dataclass
class AblationReport:
    rows: list[AblationRow] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any(r.status != "ok" for r in self.rows)

    def by_label(self, label: str) -> AblationRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("cell", "p", "csd_weight", "seeds", "accuracy", "status"))
        for r in self.rows:
            acc = "FAILED" if r.status != "ok" else f"{100 * r.accuracy:.2f}"
            w.writerow((r.label, f"{r.p:.2f}", f"{r.csd_weight:.2f}", " ".join(map(str, r.seeds)), acc, r.status))
        return buf.getvalue()

    def to_text(self) -> str:
        header = ("cell", "p", "CSD", "acc (%)")
        body = []
        for r in self.rows:
            acc = "FAILED" if r.status != "ok" else f"{100 * r.accuracy:.2f}"
            body.append((r.label, f"{r.p:.2f}", "on" if r.csd_weight > 0 else "off", acc))
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
        return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]) + "\n"


def perturb_csd_grid(p: float = 0.1) -> list[dict]:
    """Four cells: baseline, perturbation only, CSD only, both."""
    return [
        {"label": "baseline", "p": 0.0, "csd_weight": 0.0},
        {"label": "perturb", "p": p, "csd_weight": 0.0},
        {"label": "csd", "p": 0.0, "csd_weight": 1.0},
        {"label": "perturb+csd", "p": p, "csd_weight": 1.0},
    ]


def p_sweep_grid(ps: Sequence[float] = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0), csd_weight: float = 1.0) -> list[dict]:
    return [{"label": f"p={p:g}", "p": float(p), "csd_weight": csd_weight} for p in sorted(ps)]


def run_cell(cfg: TrainConfig, train_ds, test_ds, teacher, run_dir=None) -> float:
    student = build_student(cfg, train_ds.images.shape[1], train_ds.num_classes)
    if teacher is not None:
        student.copy_weights_from(teacher)
    state = train(student, teacher, cfg, train_ds, test_ds, run_dir)
    return state.final_acc


def ablate(
    grid: Sequence[dict],
    base: TrainConfig,
    train_ds,
    test_ds,
    *,
    seeds: Sequence[int] | None = None,
    teacher_for: Callable[[TrainConfig], LayeredModel] | None = None,
    runner: Callable[..., float] = run_cell,
    out_dir=None,
) -> AblationReport:
    """One training run per (cell, seed); failing cells are reported as FAILED."""
    seeds = list(seeds) if seeds is not None else [base.seed]
    report = AblationReport()
    for cell in grid:
        overrides = {k: v for k, v in cell.items() if k != "label"}
        label = cell.get("label") or ",".join(f"{k}={v}" for k, v in sorted(overrides.items()))
        row = AblationRow(label, float(overrides.get("p", base.p)),
                          float(overrides.get("csd_weight", base.csd_weight)), seeds, [])
        try:
            for seed in seeds:
                cfg = base.replace(seed=seed, **overrides)
                teacher = teacher_for(cfg) if teacher_for is not None else None
                cell_dir = Path(out_dir) / f"{label}-seed{seed}" if out_dir else None
                row.accuracies.append(runner(cfg, train_ds, test_ds, teacher, cell_dir))
        except Exception as exc:  # a failed cell must not take the table down
            row.status, row.error = "FAILED", f"{type(exc).__name__}: {exc}"
            log.error("cell %s failed: %s", label, row.error)
        report.rows.append(row)
    return report
