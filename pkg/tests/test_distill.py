import copy

import numpy as np
import pytest
import torch

import changekit as ck
from changekit.distill import (DistillConfig, StudentBundle, StudentNet, distill,
                               save_student_checkpoint, write_distill_log)
from changekit.errors import ConfigError, InputError
from changekit.losses import cosine_distance
from changekit.model import (TeacherBundle, build_model, load_checkpoint,
                             normalize_pixels)
from changekit.quantizer import GumbelQuantizer, QuantizerConfig

from conftest import tiny_model_cfg


def _tiny_teacher(seed: int = 1) -> TeacherBundle:
    cfg = tiny_model_cfg(seed=seed)
    model = build_model(cfg)
    quantizer = GumbelQuantizer(QuantizerConfig(feature_dim=cfg.feature_dim,
                                                num_entries=16, seed=seed))
    model.eval()
    quantizer.eval()
    return TeacherBundle(model=model, quantizer=quantizer)


def _tiny_distill_cfg(**overrides) -> DistillConfig:
    base = dict(epochs=2, batch_size=4, seed=2, pairs_per_scene=1)
    base.update(overrides)
    return DistillConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(lr=0).validate()
    with pytest.raises(ConfigError):
        DistillConfig(lam=-1).validate()
    with pytest.raises(ConfigError):
        DistillConfig(s_head_lr_scale=0).validate()


def test_student_head_shapes():
    cfg = tiny_model_cfg()
    student = StudentNet(cfg)
    x = torch.randn(2, 3, 16, 16)
    mu, logvar = student(x)
    assert tuple(mu.shape) == (2, cfg.feature_dim, 16, 16)
    assert tuple(logvar.shape) == (2, 1, 16, 16)
    assert (logvar.abs() <= 10.0).all()


def test_fresh_logvar_head_outputs_zero():
    student = StudentNet(tiny_model_cfg())
    _, logvar = student(torch.randn(1, 3, 16, 16))
    assert torch.equal(logvar, torch.zeros_like(logvar))


def test_init_from_teacher_reproduces_teacher_features():
    teacher = _tiny_teacher()
    student = StudentNet(tiny_model_cfg(seed=99))
    student.init_from_teacher(teacher.model)
    student.eval()
    x = torch.randn(2, 3, 16, 16)
    with torch.no_grad():
        mu, _ = student(x)
        y = teacher.model(x)
    assert torch.equal(mu, y)
    same_time = cosine_distance(normalize_pixels(mu).values,
                                normalize_pixels(y).values, dim=1).mean()
    assert same_time.item() < 1e-6


def test_teacher_is_bitwise_unchanged(tiny_scenes):
    teacher = _tiny_teacher()
    before = copy.deepcopy(teacher.model.state_dict())
    distill(teacher, tiny_scenes, _tiny_distill_cfg())
    after = teacher.model.state_dict()
    assert before.keys() == after.keys()
    for k in before:
        assert torch.equal(before[k], after[k]), k


def test_requires_two_timestamps():
    teacher = _tiny_teacher()
    mono = ck.synth_scene(0, size=32, bands=3, n_timestamps=1)
    with pytest.raises(InputError):
        distill(teacher, [mono], _tiny_distill_cfg())


def test_run_is_reproducible(tiny_scenes):
    teacher = _tiny_teacher()
    _, a = distill(teacher, tiny_scenes, _tiny_distill_cfg())
    _, b = distill(teacher, tiny_scenes, _tiny_distill_cfg())
    assert [l.total for l in a] == [l.total for l in b]


def test_lambda_zero_total_equals_uncertainty(tiny_scenes):
    teacher = _tiny_teacher()
    _, logs = distill(teacher, tiny_scenes, _tiny_distill_cfg(lam=0.0))
    for row in logs:
        assert row.total == row.uncertainty


def test_lambda_term_tightens_same_time_consistency(tiny_scenes):
    teacher = _tiny_teacher()
    # fresh student (not a teacher copy) so the consistency term has work to do
    _, with_term = distill(teacher, tiny_scenes,
                           _tiny_distill_cfg(epochs=8, lam=1.0,
                                             init_from_teacher=False, seed=4))
    _, without = distill(teacher, tiny_scenes,
                         _tiny_distill_cfg(epochs=8, lam=0.0,
                                           init_from_teacher=False, seed=4))
    assert with_term[-1].same_time < without[-1].same_time


def test_distill_log_csv(tmp_path, tiny_scenes):
    teacher = _tiny_teacher()
    _, logs = distill(teacher, tiny_scenes, _tiny_distill_cfg())
    path = tmp_path / "distill.csv"
    write_distill_log(path, logs)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == ("epoch,uncertainty,same_time,total,mean_logvar,"
                        "clamped_fraction,lr")
    assert len(lines) == 3


def test_student_checkpoint_roundtrip(tmp_path, tiny_scenes):
    teacher = _tiny_teacher()
    bundle, _ = distill(teacher, tiny_scenes, _tiny_distill_cfg())
    path = tmp_path / "student.pt"
    save_student_checkpoint(path, bundle.student)
    back = load_checkpoint(path)
    assert isinstance(back, StudentBundle)
    assert back.kind == "student"
    for k, v in bundle.student.state_dict().items():
        assert torch.equal(v, back.student.state_dict()[k])
    x = torch.randn(1, 3, 16, 16)
    f_a, s_a = bundle.features(x)
    f_b, s_b = back.features(x)
    assert torch.equal(f_a.values, f_b.values)
    assert torch.equal(s_a, s_b)


def test_gate_distillation_diagnostics(trained_student):
    logs = trained_student.logs
    assert logs[-1].total < logs[0].total
    assert logs[-1].clamped_fraction < 0.01
    assert all(np.isfinite(l.total) for l in logs)


def test_init_from_teacher_topology_check():
    teacher = _tiny_teacher()
    other = StudentNet(tiny_model_cfg(bands=4))
    with pytest.raises(ConfigError):
        other.init_from_teacher(teacher.model)
