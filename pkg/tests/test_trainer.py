import json
import math

import numpy as np
import pytest

from fpqlab import data, models
from fpqlab.autodiff import Tensor
from fpqlab.quantizer import CalibrationError, QuantizedLayerConfig
from fpqlab import trainer as T


@pytest.fixture(scope="module")
def blobs():
    return data.load("blobs", split="train"), data.load("blobs", split="test")


def cfg_for(**kw):
    base = dict(arch="mlp", dataset="blobs", wbits=4, abits=4, epochs=2, batch_size=64, lr=0.05,
                trace_every=0, gradnorm_every=5, stability_trials=3, teacher_epochs=3, calib_size=50)
    base.update(kw)
    return T.TrainConfig(**base)


def student_for(cfg, ds, teacher=None):
    s = T.build_student(cfg, ds.images.shape[1], ds.num_classes)
    if teacher is not None:
        s.copy_weights_from(teacher)
    return s


def test_cosine_schedule_points():
    assert T.cosine_lr(0, 100, 0.1) == pytest.approx(0.1)
    assert T.cosine_lr(50, 100, 0.1) == pytest.approx(0.05)
    assert T.cosine_lr(100, 100, 0.1) == pytest.approx(0.0, abs=1e-12)


def test_sgd_weight_decay_per_group():
    w = Tensor(np.ones(3), requires_grad=True)
    s = Tensor(np.ones(3), requires_grad=True)
    opt = T.SGD([{"params": [w], "weight_decay": 0.5}, {"params": [s], "weight_decay": 0.0}], momentum=0.0)
    w.grad = np.zeros(3, np.float32)
    s.grad = np.zeros(3, np.float32)
    opt.step(0.1)
    np.testing.assert_allclose(w.data, 0.95)
    np.testing.assert_allclose(s.data, 1.0)


def test_sgd_momentum_accumulates():
    w = Tensor(np.zeros(1), requires_grad=True)
    opt = T.SGD([{"params": [w]}], momentum=0.9)
    for _ in range(2):
        w.grad = np.ones(1, np.float32)
        opt.step(1.0)
    np.testing.assert_allclose(w.data, -(1 + 1.9), rtol=1e-6)


def test_sgd_group_lr_multiplier():
    a = Tensor(np.zeros(1), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    opt = T.SGD([{"params": [a]}, {"params": [b], "lr_mult": 0.1}], momentum=0.0)
    a.grad = b.grad = np.ones(1, np.float32)
    opt.step(1.0)
    np.testing.assert_allclose([a.data[0], b.data[0]], [-1.0, -0.1], rtol=1e-6)


def test_optimizer_groups_put_scales_at_zero_decay(blobs):
    cfg = cfg_for()
    s = student_for(cfg, blobs[0])
    T.calibrate_model(s, blobs[0].images[:50])
    opt = T.make_optimizer(s, cfg)
    by_name = {g["name"]: g for g in opt.groups}
    assert by_name["scales"]["weight_decay"] == 0.0 and len(by_name["scales"]["params"]) > 0
    assert by_name["weights"]["weight_decay"] == cfg.weight_decay
    assert by_name["scales"]["lr_mult"] == 1.0 and by_name["weights"]["lr_mult"] == 1.0


def test_config_validation():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        T.TrainConfig(p=1.5)
    with pytest.raises(ValueError):
        T.TrainConfig(wbits=3)
    with pytest.raises(KeyError, match="valid keys"):
        T.TrainConfig.from_dict({"learning_rate": 0.1})
    assert T.TrainConfig(dataset="cifar10").resolved_subset() == T.CIFAR_DESK_SUBSET
    assert T.TrainConfig(dataset="cifar10", full_cifar=True).resolved_subset() is None


def test_calibration_is_one_shot_and_sane():
    cfg = QuantizedLayerConfig(w_bits=4, a_bits=4, first_last_8bit=False)
    m = models.build("toy-cnn", quantized=True, qconfig=cfg, seed=0)
    for layer in m.layers:
        layer.weight.data = np.clip(layer.weight.data, -1, 1)
    x = np.random.default_rng(0).normal(size=(20, 1, 28, 28)).astype(np.float32)
    T.calibrate_model(m, x)
    for layer in m.layers:
        assert np.all(layer.weight_quant.spec.scale.data <= 2 / 15 + 1e-7)
    # inputs of layers after a ReLU are non-negative, so z sits at the bottom of the grid
    for layer in m.layers[1:]:
        assert np.all(layer.act_quant.spec.zero_point == 0)
    with pytest.raises(CalibrationError):
        T.calibrate_model(m, x)


def test_calibration_needs_quantizers():
    with pytest.raises(CalibrationError):
        T.calibrate_model(models.build("toy-cnn"), np.zeros((2, 1, 28, 28), np.float32))


def test_training_learns_blobs(blobs):
    cfg = cfg_for(epochs=5)
    state = T.train(student_for(cfg, blobs[0]), None, cfg, *blobs)
    assert state.final_acc > 0.8
    assert len(state.history) == 5 and state.step == 5 * math.ceil(600 / 64)


def test_zero_perturbation_and_csd_reduce_to_plain_lsq(blobs):
    cfg = cfg_for(p=0.0, csd_weight=0.0)
    teacher = T.train_teacher(cfg, blobs[0])
    a = T.train(student_for(cfg, blobs[0], teacher), teacher, cfg, *blobs)
    b = T.train(student_for(cfg, blobs[0], teacher), None, cfg, *blobs)
    assert a.history == b.history


def test_one_epoch_is_deterministic(tmp_path, blobs):
    cfg = cfg_for(epochs=1, p=0.5)
    teacher = T.train_teacher(cfg, blobs[0])
    runs = []
    for name in ("a", "b"):
        T.train(student_for(cfg, blobs[0], teacher), teacher, cfg, *blobs, run_dir=tmp_path / name)
        runs.append(((tmp_path / name / "metrics.jsonl").read_bytes(), (tmp_path / name / "summary.csv").read_bytes()))
    assert runs[0] == runs[1]


def test_metrics_rows_and_zero_points_frozen(tmp_path, blobs):
    cfg = cfg_for(epochs=2, p=0.5)
    s = student_for(cfg, blobs[0])
    state = T.train(s, None, cfg, *blobs, run_dir=tmp_path)
    rows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    kinds = {r["kind"] for r in rows}
    assert {"step", "epoch", "probe"} <= kinds
    epochs = [r for r in rows if r["kind"] == "epoch"]
    assert len({r["zp_hash"] for r in epochs}) == 1 and epochs[0]["zp_hash"] == T.zero_point_hash(s)
    assert state.zp_hash == T.zero_point_hash(s)
    head = (tmp_path / "summary.csv").read_text().splitlines()[0]
    assert head == ",".join(T.SUMMARY_COLUMNS)


def test_scales_stay_positive(blobs):
    cfg = cfg_for(epochs=1, lr=0.5)
    s = student_for(cfg, blobs[0])
    T.train(s, None, cfg, *blobs)
    assert all(np.all(t.data >= 1e-8) for t in s.scale_tensors())


def test_resume_reproduces_uninterrupted_run(tmp_path, blobs):
    cfg = cfg_for(epochs=3, p=0.5)
    teacher = T.train_teacher(cfg, blobs[0])
    full = T.train(student_for(cfg, blobs[0], teacher), teacher, cfg, *blobs, run_dir=tmp_path / "full")
    T.train(student_for(cfg, blobs[0], teacher), teacher, cfg, *blobs, run_dir=tmp_path / "cut",
            stop_after_epochs=1)
    resumed = T.train(student_for(cfg, blobs[0], teacher), teacher, cfg, *blobs, run_dir=tmp_path / "cut",
                      resume=tmp_path / "cut" / "checkpoint.fpq")
    assert resumed.history == full.history
    for name in ("metrics.jsonl", "summary.csv"):
        assert (tmp_path / "cut" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()


def test_divergence_raises_and_saves(tmp_path, blobs):
    cfg = cfg_for(divergence_threshold=1e-3)
    with pytest.raises(T.DivergenceError) as err:
        T.train(student_for(cfg, blobs[0]), None, cfg, *blobs, run_dir=tmp_path)
    assert err.value.step == 0 and (tmp_path / "diverged.fpq").exists()
    model, _ = T.load_model(tmp_path / "diverged.fpq")
    assert model.arch == "mlp"


def test_evaluate_constant_logits_and_policy_inert(blobs):
    m = models.MLP((4, 3), seed=0)
    m.layers[0].weight.data[:] = 0
    m.layers[0].bias.data[:] = 0
    ds = blobs[1]
    assert T.evaluate(m, ds) == pytest.approx(np.mean(ds.labels == 0))
    cfg = cfg_for()
    s = student_for(cfg, blobs[0])
    T.calibrate_model(s, blobs[0].images[:50])
    from fpqlab.perturbation import PerturbPolicy
    assert T.evaluate(s, ds) == T.evaluate(s, ds, policy=PerturbPolicy(p=1.0, seed=0))


def test_teacher_cache(tmp_path, blobs):
    cfg = cfg_for()
    a = T.train_teacher(cfg, blobs[0], tmp_path)
    assert len(list(tmp_path.glob("teacher-*.fpq"))) == 1
    b = T.train_teacher(cfg, blobs[0], tmp_path)
    assert all(np.array_equal(a.state_dict()[k], v) for k, v in b.state_dict().items())


def fake_runner(cfg, train, test, teacher, run_dir):
    if cfg.p == 0.5:
        raise RuntimeError("boom")
    return 0.5 + cfg.p / 10 + cfg.seed / 100


def test_ablate_empty_grid(blobs):
    assert T.ablate([], cfg_for(), *blobs, runner=fake_runner).rows == []


def test_ablate_marks_failed_cells(blobs):
    rep = T.ablate(T.p_sweep_grid((1.0, 0.5, 0.1)), cfg_for(), *blobs, seeds=[0, 1], runner=fake_runner)
    assert [r.label for r in rep.rows] == ["p=0.1", "p=0.5", "p=1"]
    assert rep.failed and rep.by_label("p=0.5").status == "FAILED"
    assert "FAILED" in rep.to_text() and "FAILED" in rep.to_csv()
    assert rep.by_label("p=0.1").accuracy == pytest.approx(0.515)


def test_ablate_two_by_two(blobs):
    rep = T.ablate(T.perturb_csd_grid(0.1), cfg_for(), *blobs, runner=fake_runner)
    assert len(rep.rows) == 4 and not rep.failed
    assert [r.label for r in rep.rows] == ["baseline", "perturb", "csd", "perturb+csd"]


def test_run_cell_end_to_end(blobs):
    cfg = cfg_for(epochs=2)
    teacher = T.train_teacher(cfg, blobs[0])
    rep = T.ablate(T.perturb_csd_grid(0.1)[:2], cfg, *blobs, teacher_for=lambda c: teacher)
    assert not rep.failed and all(0 <= r.accuracy <= 1 for r in rep.rows)


@pytest.mark.slow
def test_toy_cnn_w4a4_fpq_not_below_lsq(tmp_path):
    pytest.importorskip("mlxtend")
    root = data.materialize_mnist_subset(tmp_path / "data")
    cfg = T.TrainConfig(data_root=str(root), wbits=4, abits=4, epochs=10, trace_every=0, stability_trials=0)
    train_ds, test_ds = T.load_data(cfg)
    teacher = T.train_teacher(cfg, train_ds)
    acc = {}
    for name, p, c in (("lsq", 0.0, 0.0), ("fpq", 0.1, 1.0)):
        run = cfg.replace(p=p, csd_weight=c)
        acc[name] = T.train(student_for(run, train_ds, teacher), teacher, run, train_ds, test_ds).final_acc
    print(f"W4A4 toy CNN: LSQ {acc['lsq']:.4f}, FPQ {acc['fpq']:.4f}")
    assert acc["fpq"] >= acc["lsq"] - 0.002
