import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmvit.autodiff import SGD, SgdState, Tensor, backward, check_gradients
from gmvit.autodiff import functional as F
from gmvit.distillation import (SWEEP_ORDER, TARGETS, DistillConfig, IncompatibleTapsError, Taps,
                                distill_step, loss_cnn, loss_global, loss_group, loss_hard, loss_logit,
                                loss_soft, loss_token, loss_total, loss_view, teacher_taps)
from gmvit.model import GMViT, ModelConfig, micro_config
from gmvit.training import train_step


class Out:
    """Minimal stand-in for ModelOutputs carrying only the tapped tensors."""

    def __init__(self, f_cnn, f_view, tokens, f_group, f_global, logits):
        self.f_cnn, self.f_view, self.tokens = f_cnn, f_view, tokens
        self.f_group, self.f_global, self.logits = f_group, f_global, logits


def rand_taps(rng, B=2, N=4, M=3, D=5, C=3):
    return Taps(rng.normal(size=(B, N, D)), rng.normal(size=(B, N, D)), rng.random((B, N)),
                rng.normal(size=(B, M, D)), rng.normal(size=(B, D)), rng.normal(size=(B, C)))


def as_out(taps, requires_grad=True):
    return Out(*(Tensor(getattr(taps, k).copy(), requires_grad=requires_grad) for k in Taps.__dataclass_fields__))


def loop_mse(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    s = 0.0
    for x, y in zip(a, b):
        s += (x - y) ** 2
    return s / len(a)


# ---------------------------------------------------------------- config
def test_config_defaults():
    c = DistillConfig()
    assert c.temperature == 5 and (c.c_soft, c.c_hard) == (0.7, 0.3)
    assert all(c.switches.values()) and all(w == 1.0 for w in c.weights.values())
    assert not c.t2_scale and not c.literal_label_softmax


@pytest.mark.parametrize("kw", [dict(temperature=0), dict(c_soft=0.6, c_hard=0.3), dict(c_soft=-0.1, c_hard=1.1)])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        DistillConfig(**kw)


def test_sweep_rows_are_cumulative():
    rows = [DistillConfig.sweep_row(k) for k in range(7)]
    assert rows[0].enabled() == [] and rows[0].hard
    assert set(rows[6].enabled()) == set(TARGETS)
    for k in range(1, 7):
        assert set(rows[k].enabled()) - set(rows[k - 1].enabled()) == {SWEEP_ORDER[k - 1]}


# ----------------------------------------------------------- feature terms
@pytest.mark.parametrize("fn,key", [(loss_cnn, "f_cnn"), (loss_view, "f_view"), (loss_token, "tokens"),
                                    (loss_group, "f_group"), (loss_global, "f_global")])
def test_feature_terms_zero_one_and_oracle(fn, key):
    rng = np.random.default_rng(0)
    t = rand_taps(rng)
    assert float(fn(t, as_out(t)).data) == 0.0
    ones = Taps(*(np.ones_like(getattr(t, k)) for k in Taps.__dataclass_fields__))
    zeros = as_out(Taps(*(np.zeros_like(getattr(t, k)) for k in Taps.__dataclass_fields__)))
    assert float(fn(ones, zeros).data) == pytest.approx(1.0, abs=1e-15)
    s = rand_taps(np.random.default_rng(1))
    got = float(fn(t, as_out(s)).data)
    assert got == pytest.approx(loop_mse(getattr(t, key), getattr(s, key)), abs=1e-12)
    # doubling the difference quadruples the loss
    s2 = Taps(*(2 * getattr(s, k) - getattr(t, k) for k in Taps.__dataclass_fields__))
    assert float(fn(t, as_out(s2)).data) == pytest.approx(4 * got, rel=1e-12)


def test_cnn_loss_is_mean_of_per_view_mse():
    rng = np.random.default_rng(2)
    t, s = rand_taps(rng, B=1), rand_taps(rng, B=1)
    per_view = [loop_mse(t.f_cnn[0, n], s.f_cnn[0, n]) for n in range(4)]
    assert float(loss_cnn(t, as_out(s)).data) == pytest.approx(np.mean(per_view), abs=1e-12)


def test_token_hand_case_and_gradient():
    t = Taps(*([None] * 2), np.array([[1.0, 0.0]]), *([None] * 3))
    s = Tensor(np.array([[0.0, 1.0]]), requires_grad=True)
    out = Out(None, None, s, None, None, None)
    loss = loss_token(t, out)
    assert float(loss.data) == 1.0
    backward(loss)
    np.testing.assert_allclose(s.grad, 2 * (s.data - t.tokens) / 2)
    s2 = Tensor(np.random.default_rng(0).random((1, 6)), requires_grad=True)
    t2 = Taps(None, None, np.random.default_rng(1).random((1, 6)), None, None, None)
    assert check_gradients(lambda: loss_token(t2, Out(None, None, s2, None, None, None)), [s2]) < 1e-6


def test_group_empty_teacher_slot_counts_student_row():
    D = 4
    tg = np.zeros((1, 2, D))
    tg[0, 0] = 1.0
    sg = np.zeros((1, 2, D))
    sg[0, 0] = 1.0
    sg[0, 1] = np.array([1.0, 2.0, 0.0, -1.0])  # teacher slot 1 empty
    t = Taps(None, None, None, tg, None, None)
    val = float(loss_group(t, Out(None, None, None, Tensor(sg), None, None)).data)
    slot_mse = [loop_mse(tg[0, m], sg[0, m]) for m in range(2)]
    assert val == pytest.approx(np.mean(slot_mse), abs=1e-15)
    assert val == pytest.approx((0.0 + loop_mse(np.zeros(D), sg[0, 1])) / 2, abs=1e-15)


def test_shape_mismatch_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(IncompatibleTapsError):
        loss_view(rand_taps(rng, D=5), as_out(rand_taps(rng, D=6)))


# ------------------------------------------------------------- logit term
def _softmax(z, T):
    e = [math.exp(v / T - max(z) / T) for v in z]
    s = sum(e)
    return [x / s for x in e]


def test_logit_hand_example_at_T5():
    zt, zs, label = [2.0, -1.0, 0.5], [0.3, 0.9, -2.0], 2
    pt, ps = _softmax(zt, 5.0), _softmax(zs, 5.0)
    kl = sum(a * math.log(a / b) for a, b in zip(pt, ps))
    ce = -math.log(_softmax(zs, 1.0)[label])
    expect = 0.7 * kl + 0.3 * ce
    t = Taps(None, None, None, None, None, np.array([zt]))
    s = Out(None, None, None, None, None, Tensor(np.array([zs])))
    assert float(loss_logit(t, s, DistillConfig(), [label]).data) == pytest.approx(expect, abs=1e-10)
    assert float(loss_soft(t, s, DistillConfig(t2_scale=True)).data) == pytest.approx(25 * kl, abs=1e-10)


def test_logit_degenerate_cases():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(4, 5))
    labels = np.array([0, 1, 2, 3])
    t = Taps(None, None, None, None, None, z)
    s = Out(None, None, None, None, None, Tensor(z.copy()))
    assert abs(float(loss_soft(t, s, DistillConfig()).data)) < 1e-15
    cfg = DistillConfig(c_soft=0.0, c_hard=1.0)
    s2 = Out(None, None, None, None, None, Tensor(rng.normal(size=(4, 5))))
    assert float(loss_logit(t, s2, cfg, labels).data) == pytest.approx(
        float(F.cross_entropy(s2.logits, labels).data), abs=1e-15)


def test_literal_label_variant_differs():
    s = Out(None, None, None, None, None, Tensor(np.array([[1.0, 0.0, -1.0]])))
    a = float(loss_hard(s, [0], DistillConfig()).data)
    b = float(loss_hard(s, [0], DistillConfig(literal_label_softmax=True)).data)
    e = math.e
    target = [e / (e + 2), 1 / (e + 2), 1 / (e + 2)]
    logp = [math.log(p) for p in _softmax([1.0, 0.0, -1.0], 1.0)]
    assert b == pytest.approx(-sum(q * lp for q, lp in zip(target, logp)), abs=1e-12) and a != b


def test_soft_loss_decreases_with_temperature():
    rng = np.random.default_rng(4)
    for _ in range(100):
        zt, zs = rng.normal(size=(1, 6)) * 3, rng.normal(size=(1, 6)) * 3
        t = Taps(None, None, None, None, None, zt)
        s = Out(None, None, None, None, None, Tensor(zs))
        vals = [float(loss_soft(t, s, DistillConfig(temperature=T)).data) for T in (1, 5, 100)]
        assert all(np.isfinite(vals))
        assert vals[2] < vals[0]


# ------------------------------------------------------------------ total
def test_total_is_sum_of_terms():
    rng = np.random.default_rng(5)
    t, s = rand_taps(rng), as_out(rand_taps(rng))
    labels = np.array([0, 2])
    total, rep = loss_total(t, s, DistillConfig(), labels)
    parts = [float(f(t, s).data) for f in (loss_cnn, loss_view, loss_token, loss_group, loss_global)]
    parts.append(float(loss_logit(t, s, DistillConfig(), labels).data))
    assert float(total.data) == pytest.approx(sum(parts), abs=1e-12)
    assert rep["total"] == float(total.data)
    assert set(rep) == {"cnn", "view", "token", "group", "global", "soft", "hard", "total"}


def test_hard_only_total_is_cross_entropy():
    rng = np.random.default_rng(6)
    s = as_out(rand_taps(rng))
    total, rep = loss_total(None, s, DistillConfig.hard_only(), [1, 0])
    assert float(total.data) == float(F.cross_entropy(s.logits, [1, 0]).data)
    assert set(rep) == {"hard", "total"}


def test_missing_teacher_rejected():
    with pytest.raises(ValueError):
        loss_total(None, as_out(rand_taps(np.random.default_rng(0))), DistillConfig(), [0, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.booleans(), min_size=6, max_size=6))
def test_terms_non_negative_and_additive(seed, flags):
    rng = np.random.default_rng(seed)
    t, s = rand_taps(rng), as_out(rand_taps(rng))
    cfg = DistillConfig(switches=dict(zip(TARGETS, flags)))
    total, rep = loss_total(t, s, cfg, [0, 1])
    terms = {k: v for k, v in rep.items() if k != "total"}
    assert all(v >= 0 and np.isfinite(v) for v in terms.values())
    expect = sum(v for k, v in terms.items() if k in _FEATURE)
    if cfg.switches["logit"]:
        expect += 0.7 * terms["soft"] + 0.3 * terms["hard"]
    else:
        expect += terms["hard"]
    assert rep["total"] == pytest.approx(expect, rel=1e-12, abs=1e-15)


_FEATURE = ("cnn", "view", "token", "group", "global")


# -------------------------------------------------------- with real models
def _data(cfg, B=4, seed=0):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(cfg.N, 3))
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)
    return rng.random((B, cfg.N, cfg.H, cfg.W)), pos, rng.integers(0, cfg.C, B)


def test_cloned_teacher_fixpoint():
    cfg = micro_config("teacher", M=3, N=6)
    teacher = GMViT(cfg, np.random.default_rng(0))
    student = GMViT(cfg, np.random.default_rng(99))
    student.load_state_dict(teacher.state_dict())
    x, pos, y = _data(cfg)
    taps = teacher_taps(teacher, x, pos)
    student.eval()
    _, rep = loss_total(taps, student(x, pos), DistillConfig(), y)
    for k in ("cnn", "view", "token", "group", "global", "soft"):
        assert abs(rep[k]) < 1e-10, k


def test_distill_step_freezes_teacher():
    tcfg, scfg = micro_config("teacher"), micro_config("mini")
    teacher, student = GMViT(tcfg, np.random.default_rng(0)), GMViT(scfg, np.random.default_rng(1))
    before = {k: v.copy() for k, v in teacher.state_dict().items()}
    x, pos, y = _data(tcfg)
    opt = SGD(student.parameters(), SgdState())
    rec = distill_step(teacher, student, x, pos, y, DistillConfig(), opt, 0)
    after = teacher.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert all(p.grad is None for p in teacher.parameters())
    assert all(np.isfinite(v) and v >= 0 for v in rec.values())


def test_hard_only_step_equals_supervised_step():
    cfg = micro_config("mini", dropout=0.5)
    x, pos, y = _data(cfg)
    weights = []
    for mode in ("train", "distill"):
        m = GMViT(cfg, np.random.default_rng(1))
        m.dropout_rng = np.random.default_rng(5)
        opt = SGD(m.parameters(), SgdState())
        for step in range(3):
            if mode == "train":
                train_step(m, x, pos, y, opt, step)
            else:
                distill_step(None, m, x, pos, y, DistillConfig.hard_only(), opt, step)
        weights.append([p.data.copy() for p in m.parameters()])
    assert all(np.array_equal(a, b) for a, b in zip(*weights))


def test_cached_taps_match_live_teacher():
    tcfg, scfg = micro_config("teacher"), micro_config("simple")
    x, pos, y = _data(tcfg)
    results = []
    for cached in (False, True):
        teacher, student = GMViT(tcfg, np.random.default_rng(0)), GMViT(scfg, np.random.default_rng(1))
        opt = SGD(student.parameters(), SgdState())
        taps = teacher_taps(teacher, x, pos) if cached else None
        distill_step(teacher, student, x, pos, y, DistillConfig(), opt, 0, cached=taps)
        results.append([p.data.copy() for p in student.parameters()])
    assert all(np.array_equal(a, b) for a, b in zip(*results))


def test_incompatible_models_rejected():
    teacher = GMViT(micro_config("teacher"), np.random.default_rng(0))
    student = GMViT(micro_config("mini", D=12, heads=2), np.random.default_rng(0))
    x, pos, y = _data(teacher.config)
    opt = SGD(student.parameters())
    with pytest.raises(IncompatibleTapsError):
        distill_step(teacher, student, x, pos, y, DistillConfig(), opt, 0)


@pytest.mark.parametrize("variant", ["mini", "simple"])
def test_total_loss_gradcheck_on_student(variant):
    teacher = GMViT(micro_config("teacher"), np.random.default_rng(0))
    student = GMViT(micro_config(variant), np.random.default_rng(1))
    x, pos, y = _data(teacher.config, B=3)
    taps = teacher_taps(teacher, x, pos)
    x2 = x + 0.05 * np.random.default_rng(3).normal(size=x.shape)
    err = check_gradients(lambda: loss_total(taps, student(x2, pos), DistillConfig(), y)[0],
                          student.parameters(), max_coords=6)
    assert err < 1e-3


def test_model_config_mismatch_message():
    with pytest.raises(IncompatibleTapsError, match="D="):
        from gmvit.distillation import check_compatible

        check_compatible(GMViT(ModelConfig(variant="mini", D=8, heads=2, N=4, M=2, C=3, cnn_widths=(2, 4), H=8, W=8)),
                         GMViT(ModelConfig(variant="mini", D=16, heads=2, N=4, M=2, C=3, cnn_widths=(2, 4), H=8, W=8)))
