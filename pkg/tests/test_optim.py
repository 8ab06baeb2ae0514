import math

import numpy as np
import pytest

from discover import autodiff as ad
from discover.autodiff import ContractError
from discover.optim import AdamW, clip_grad_norm


def reference_adam(p0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Independent float64 Adam recurrence (no weight decay)."""
    p, m, v = np.array(p0, dtype=np.float64), 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(p.copy())
    return out


def test_single_scalar_step_moves_by_lr():
    p = ad.parameter(np.array([1.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)
    assert opt.state.step == 1


def test_zero_gradient_zero_decay_is_noop():
    p = ad.parameter(np.array([1.5, -2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    for _ in range(3):
        p.grad = np.zeros(2, dtype=np.float32)
        opt.step()
    np.testing.assert_array_equal(p.data, np.array([1.5, -2.0], dtype=np.float32))


def test_decoupled_decay_with_zero_gradient():
    p = ad.parameter(np.array([2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), rel=1e-6)


def test_zero_weight_decay_matches_reference_adam(rng):
    grads = rng.standard_normal((25, 3))
    p = ad.parameter(np.zeros(3))
    opt = AdamW([p], lr=0.01, weight_decay=0.0)
    ref = reference_adam(np.zeros(3), grads, lr=0.01)
    for g, r in zip(grads, ref):
        p.grad = g.astype(np.float32)
        opt.step()
        np.testing.assert_allclose(p.data, r, atol=1e-6)


@pytest.mark.parametrize("g", [0.3, -2.0])
def test_constant_gradient_update_sign(g):
    p = ad.parameter(np.array([0.0]))
    opt = AdamW([p], lr=0.01, weight_decay=0.0)
    prev = 0.0
    for _ in range(20):
        p.grad = np.array([g], dtype=np.float32)
        opt.step()
        assert np.sign(p.data[0] - prev) == -np.sign(g)
        prev = p.data[0]


def test_moment_buffers_match_shapes_and_step_increments(rng):
    ps = [ad.parameter(rng.standard_normal(s)) for s in [(2, 3), (4,)]]
    opt = AdamW(ps)
    for k in range(1, 4):
        for p in ps:
            p.grad = np.ones(p.shape, dtype=np.float32)
        opt.step()
        assert opt.state.step == k
    assert [m.shape for m in opt.state.m] == [(2, 3), (4,)]
    assert [v.shape for v in opt.state.v] == [(2, 3), (4,)]


def test_missing_gradient_names_parameter():
    p = ad.parameter(np.ones(2), name="enc.weight")
    with pytest.raises(ContractError, match="enc.weight"):
        AdamW([p]).step()


def test_gradient_shape_mismatch():
    p = ad.parameter(np.ones(2), name="b")
    p.grad = np.ones(3, dtype=np.float32)
    with pytest.raises(ContractError):
        AdamW([p]).step()


def test_determinism_bit_identical():
    def run():
        r = np.random.default_rng(0)
        p = ad.parameter(r.standard_normal(4))
        opt = AdamW([p], lr=0.05)
        for _ in range(10):
            p.grad = r.standard_normal(4).astype(np.float32)
            opt.step()
        return p.data.tobytes()

    assert run() == run()


def test_clip_below_threshold_unchanged():
    p = ad.parameter(np.zeros(2))
    p.grad = np.array([0.3, 0.4], dtype=np.float32)
    assert clip_grad_norm([p], 1.0) == pytest.approx(0.5)
    np.testing.assert_allclose(p.grad, [0.3, 0.4])


def test_clip_three_four_five():
    p = ad.parameter(np.zeros(2))
    p.grad = np.array([3.0, 4.0], dtype=np.float32)
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(p.grad, [0.6, 0.8], rtol=1e-6)


def test_clip_is_global_across_parameters():
    a, b = ad.parameter(np.zeros(1)), ad.parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0], np.float32), np.array([4.0], np.float32)
    clip_grad_norm([a, b], 2.5)
    np.testing.assert_allclose([a.grad[0], b.grad[0]], [1.5, 2.0], rtol=1e-6)


def test_clip_nan_flag_leaves_grads():
    p = ad.parameter(np.zeros(2))
    p.grad = np.array([np.nan, 1.0], dtype=np.float32)
    assert math.isnan(clip_grad_norm([p], 1.0))
    assert p.grad[1] == 1.0


def test_clip_requires_positive_max_norm():
    with pytest.raises(ContractError):
        clip_grad_norm([], 0.0)
