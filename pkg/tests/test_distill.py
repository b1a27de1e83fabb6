import numpy as np
import pytest

from polykerv import autograd as ag
from polykerv.data import synthetic_spirals
from polykerv.distill import KDConfig, kd_step, soft_labels, train_distilled
from polykerv.errors import ConfigurationError
from polykerv.netspec import LayerSpec, NetworkSpec, surgery
from polykerv.network import Network
from polykerv.optim import SGD
from polykerv.zoo import build


def linear_net(seed, in_features=4, classes=2):
    spec = NetworkSpec(
        input_shape=(1, 2, 2),
        num_classes=classes,
        layers=[
            LayerSpec("flatten", "flatten", {}),
            LayerSpec("linear", "fc", {"in_features": in_features, "out_features": classes}),
        ],
    )
    return Network.build(spec, seed=seed)


def small_batch(rng, n=6):
    imgs = rng.random((n, 1, 2, 2)).astype(ag.default_dtype())
    labels = rng.integers(0, 2, size=n)
    return imgs, labels


def sgd_pair(teacher, student, t_lr, s_lr):
    return SGD(teacher.params, t_lr, momentum=0.0), SGD(student.params, s_lr, momentum=0.0)


# -- kd_step ------------------------------------------------------------------------


def test_kd_step_matches_hand_simulation(f64, rng):
    teacher = linear_net(seed=1)
    student = linear_net(seed=2)
    imgs, labels = small_batch(rng)
    cfg = KDConfig(teacher_lr=0.1, student_lr=0.05, temperature=1.0, mix=1.0, optimizer="sgd")
    t_opt, s_opt = sgd_pair(teacher, student, 0.1, 0.05)

    # hand simulation with plain numpy
    x = imgs.reshape(6, 4)
    tw, tb = teacher.params["fc.weight"].data.copy(), teacher.params["fc.bias"].data.copy()
    sw, sb = student.params["fc.weight"].data.copy(), student.params["fc.bias"].data.copy()

    def softmax(z):
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    logits_t = x @ tw.T + tb
    p = softmax(logits_t)
    onehot = np.eye(2)[labels]
    t_loss_hand = -np.log(p[np.arange(6), labels]).mean()
    dlogits = (p - onehot) / 6
    tw2 = tw - 0.1 * (dlogits.T @ x)
    tb2 = tb - 0.1 * dlogits.sum(axis=0)

    soft = softmax(x @ tw2.T + tb2)
    logits_s = x @ sw.T + sb
    q = softmax(logits_s)
    lsm = logits_s - logits_s.max(axis=1, keepdims=True)
    lsm = lsm - np.log(np.exp(lsm).sum(axis=1, keepdims=True))
    s_loss_hand = np.mean(np.sum(soft * (np.log(soft) - lsm), axis=1))
    dlogits_s = (q - soft) / 6
    sw2 = sw - 0.05 * (dlogits_s.T @ x)
    sb2 = sb - 0.05 * dlogits_s.sum(axis=0)

    t_loss, s_loss = kd_step(teacher, student, imgs, labels, cfg, t_opt, s_opt)

    assert abs(t_loss - t_loss_hand) < 1e-8
    assert abs(s_loss - s_loss_hand) < 1e-8
    np.testing.assert_allclose(teacher.params["fc.weight"].data, tw2, atol=1e-8)
    np.testing.assert_allclose(teacher.params["fc.bias"].data, tb2, atol=1e-8)
    np.testing.assert_allclose(student.params["fc.weight"].data, sw2, atol=1e-8)
    np.testing.assert_allclose(student.params["fc.bias"].data, sb2, atol=1e-8)


def test_kd_loss_nonnegative_for_identical_twins(f64, rng):
    teacher = linear_net(seed=5)
    student = linear_net(seed=5)
    imgs, labels = small_batch(rng)
    cfg = KDConfig(teacher_lr=0.1, student_lr=1e-12, mix=1.0, optimizer="sgd")
    t_opt, s_opt = sgd_pair(teacher, student, 0.1, 1e-12)
    _, s_loss = kd_step(teacher, student, imgs, labels, cfg, t_opt, s_opt)
    # the teacher moved first, so the (frozen-ish) student's KL to the updated
    # teacher is strictly positive
    assert s_loss > 0.0


def test_kd_mix_zero_is_plain_ce_training(f64, rng):
    imgs, labels = small_batch(rng)
    student_a = linear_net(seed=3)
    student_b = linear_net(seed=3)
    teacher = linear_net(seed=4)
    cfg = KDConfig(teacher_lr=0.1, student_lr=0.05, mix=0.0, optimizer="sgd")
    t_opt, s_opt = sgd_pair(teacher, student_a, 0.1, 0.05)
    kd_step(teacher, student_a, imgs, labels, cfg, t_opt, s_opt)

    logits = student_b.forward(imgs)
    loss = ag.cross_entropy(logits, labels)
    loss.backward()
    opt_b = SGD(student_b.params, 0.05, momentum=0.0)
    opt_b.step()
    for name in student_a.params:
        np.testing.assert_array_equal(student_a.params[name].data, student_b.params[name].data)


def test_kd_mix_one_never_reads_hard_labels(f64, rng, monkeypatch):
    import polykerv.distill as distill_module

    calls = []
    real_ce = distill_module.cross_entropy

    def counting_ce(logits, labels):
        calls.append(np.asarray(labels).copy())
        return real_ce(logits, labels)

    monkeypatch.setattr(distill_module, "cross_entropy", counting_ce)
    teacher = linear_net(seed=1)
    student = linear_net(seed=2)
    imgs, labels = small_batch(rng)
    cfg = KDConfig(teacher_lr=0.1, student_lr=0.05, mix=1.0, optimizer="sgd")
    t_opt, s_opt = sgd_pair(teacher, student, 0.1, 0.05)
    kd_step(teacher, student, imgs, labels, cfg, t_opt, s_opt)
    assert len(calls) == 1  # exactly one CE evaluation: the teacher's


def test_kd_temperature_softens_labels(f64, rng):
    teacher = linear_net(seed=8)
    imgs, _ = small_batch(rng)
    sharp = soft_labels(teacher, imgs, temperature=0.5)
    soft = soft_labels(teacher, imgs, temperature=5.0)
    assert np.abs(soft - 0.5).max() < np.abs(sharp - 0.5).max()
    np.testing.assert_allclose(soft.sum(axis=1), 1.0, atol=1e-5)


def test_kd_class_count_mismatch(f64, rng):
    teacher = linear_net(seed=1, classes=2)
    student = linear_net(seed=2, classes=3)
    imgs, labels = small_batch(rng)
    cfg = KDConfig(optimizer="sgd")
    t_opt, s_opt = sgd_pair(teacher, student, 1e-3, 1e-3)
    with pytest.raises(ConfigurationError):
        kd_step(teacher, student, imgs, labels, cfg, t_opt, s_opt)


def test_kd_config_validation():
    with pytest.raises(ConfigurationError):
        KDConfig(temperature=0.0)
    with pytest.raises(ConfigurationError):
        KDConfig(mix=1.5)


# -- train_distilled -------------------------------------------------------------------


def kd_datasets():
    train = synthetic_spirals(30, classes=3, noise_sd=0.1, seed=0, split="train")
    val = synthetic_spirals(15, classes=3, noise_sd=0.1, seed=91, split="test")
    return train, val


def build_pair(seed=0):
    spec = build("cnn3", 0.25, 3, (1, 16, 16))
    teacher = Network.build(spec, seed=seed)
    student = Network.build(surgery(spec, "react"), seed=seed + 1)
    return teacher, student


def test_train_distilled_zero_epochs():
    train, val = kd_datasets()
    teacher, student = build_pair()
    before_t = teacher.state_arrays()
    before_s = student.state_arrays()
    result = train_distilled(teacher, student, train, val, KDConfig(), epochs=0, batch_size=16)
    assert result.teacher_records == [] and result.student_records == []
    for k, v in teacher.state_arrays().items():
        np.testing.assert_array_equal(v, before_t[k])
    for k, v in student.state_arrays().items():
        np.testing.assert_array_equal(v, before_s[k])


def test_train_distilled_runs_and_is_deterministic():
    def run():
        train, val = kd_datasets()
        teacher, student = build_pair(seed=2)
        result = train_distilled(
            teacher, student, train, val, KDConfig(teacher_lr=1e-3, student_lr=1e-3), epochs=3, batch_size=16, seed=5
        )
        return result

    a, b = run(), run()
    la = [r.to_json_line() for r in a.teacher_records + a.student_records]
    lb = [r.to_json_line() for r in b.teacher_records + b.student_records]
    assert la == lb
    assert len(a.teacher_records) == 3 and len(a.student_records) == 3
    assert a.best_student_state is not None


def test_teacher_plateau_reduces_teacher_lr_only():
    train, val = kd_datasets()
    teacher, student = build_pair(seed=3)
    cfg = KDConfig(
        teacher_lr=1e-5,
        student_lr=1e-5,
        optimizer="adam",
        teacher_plateau={"patience": 0, "factor": 0.1},
    )
    result = train_distilled(teacher, student, train, val, cfg, epochs=5, batch_size=16, seed=3)
    t_lrs = [min(r.lrs) for r in result.teacher_records]
    s_lrs = [min(r.lrs) for r in result.student_records]
    assert t_lrs[-1] < 1e-5
    assert all(b <= a for a, b in zip(t_lrs, t_lrs[1:]))
    assert set(s_lrs) == {1e-5}


def test_teacher_untouched_by_student_backward(f64, rng):
    teacher = linear_net(seed=1)
    student = linear_net(seed=2)
    imgs, labels = small_batch(rng)
    cfg = KDConfig(teacher_lr=0.1, student_lr=0.05, mix=1.0, optimizer="sgd")
    t_opt, s_opt = sgd_pair(teacher, student, 0.1, 0.05)
    kd_step(teacher, student, imgs, labels, cfg, t_opt, s_opt)
    for name, p in teacher.param_items():
        assert p.grad is None, f"teacher grad leaked through {name}"


def test_soft_labels_are_distributions_every_step(f64, rng):
    teacher = linear_net(seed=1)
    imgs, _ = small_batch(rng)
    for temperature in (0.5, 1.0, 4.0):
        soft = soft_labels(teacher, imgs, temperature)
        assert (soft >= 0).all()
        np.testing.assert_allclose(soft.sum(axis=1), 1.0, atol=1e-5)
