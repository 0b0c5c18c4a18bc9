import numpy as np
import pytest
from hypothesis import given, strategies as st

from lvnas.optim import Adam, first_step_update, lr_at, no_decay
from lvnas.tensor import Parameter


def test_lr_schedule_examples():
    assert lr_at(0, 1e-3, 100, 1000) == 0.0
    assert lr_at(100, 1e-3, 100, 1000) == pytest.approx(1e-3)
    assert lr_at(550, 1e-3, 100, 1000) == pytest.approx(5e-4)
    assert lr_at(50, 1e-3, 100, 1000) == pytest.approx(5e-4)
    assert lr_at(1000, 1e-3, 100, 1000) == 0.0
    assert lr_at(5, 2.0, 0, 10) == pytest.approx(1.0)  # no warmup: pure decay


@given(st.integers(0, 500), st.integers(1, 2000), st.floats(1e-6, 1.0))
def test_lr_schedule_is_piecewise_linear(warmup, extra, peak):
    total = warmup + extra
    mid = lr_at((warmup + total) // 2, peak, warmup, total)
    assert 0 <= mid <= peak
    assert lr_at(warmup, peak, warmup, total) == pytest.approx(peak)
    if (warmup + total) % 2 == 0:
        assert mid == pytest.approx(peak / 2)
    rates = [lr_at(t, peak, warmup, total) for t in range(total + 1)]
    assert max(rates) == pytest.approx(peak)
    diffs = np.diff(rates)
    assert (diffs[:warmup] >= -1e-15).all() and (diffs[warmup:] <= 1e-15).all()


def test_lr_schedule_rejects_bad_warmup():
    with pytest.raises(ValueError):
        lr_at(0, 1e-3, 10, 10)


def test_zero_gradient_leaves_parameters():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam({"w": p}, 0.1, weight_decay=0.0)
    opt.step()
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


@pytest.mark.parametrize("g", [3.0, -0.5, 1e-3, 2e-6, -1e-9])
def test_first_step_closed_form(g):
    p = Parameter(np.array([0.25]))
    p.grad[...] = g
    Adam({"w": p}, 0.01, weight_decay=0.0).step()
    expected = 0.25 + first_step_update(g, 0.01)
    assert p.value[0] == pytest.approx(expected, rel=1e-12)
    if abs(g) > 1e-3:
        assert p.value[0] - 0.25 == pytest.approx(-0.01 * np.sign(g), rel=1e-3)


def test_quadratic_convergence():
    p = Parameter(np.array([1.0]))
    opt = Adam({"theta": p}, 0.1, weight_decay=0.0)
    for _ in range(100):
        p.grad[...] = 2 * p.value
        opt.step()
    assert abs(p.value[0]) < 0.1


def test_matches_reference_over_many_steps(rng):
    """Vectorised update against a scalar re-derivation of bias-corrected Adam with decoupled decay."""
    w = Parameter(rng.normal(size=5))
    grads = rng.normal(size=(30, 5))
    lr, b1, b2, eps, wd = 0.05, 0.8, 0.95, 1e-6, 0.1
    opt = Adam({"w": w}, lr, b1, b2, eps, wd)
    ref = w.value.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t, g in enumerate(grads, 1):
        w.grad[...] = g
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * wd * ref
        ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(w.value, ref, rtol=1e-12, atol=1e-15)


def test_weight_decay_exemptions():
    assert no_decay("pos0.sa.b_q") and no_decay("emb.ln_gamma") and no_decay("head.out_bias")
    assert not no_decay("pos0.sa.w_q") and not no_decay("emb.token_table")
    decayed, exempt = Parameter(np.ones(3)), Parameter(np.ones(3))
    Adam({"x.w": decayed, "x.b_out": exempt}, 0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(decayed.value, 0.95)
    np.testing.assert_array_equal(exempt.value, 1.0)


def test_default_weight_decay():
    assert Adam({}).weight_decay == 0.01


def test_schedule_callable_and_step_counter():
    p = Parameter(np.zeros(1))
    seen = []
    opt = Adam({"w": p}, lambda t: seen.append(t) or 0.0)
    opt.step()
    opt.step()
    assert seen == [1, 2] and opt.t == 2


def test_partial_steps_keep_frozen_state():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    opt = Adam({"a": a, "b": b}, 0.1, weight_decay=0.0)
    a.grad[...] = 1.0
    b.grad[...] = 1.0
    opt.step(["a"])
    np.testing.assert_array_equal(b.value, 1.0)
    assert opt.state["b"].t == 0 and not opt.state["b"].m.any()
    opt.step(["b"])  # b's first update still uses its own bias correction
    np.testing.assert_allclose(b.value, 1.0 + first_step_update(1.0, 0.1))


def test_shape_mismatch_raises():
    p = Parameter(np.ones(3))
    opt = Adam({"w": p}, 0.1)
    p.grad = np.ones(4)
    with pytest.raises(ValueError):
        opt.step()
