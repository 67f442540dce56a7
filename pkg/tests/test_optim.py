import numpy as np
import pytest

from fdarts.autograd import NumericFault, Tensor
from fdarts.optim import adam_step, cosine_lr, sgd_momentum_step

from oracles import adam_reference


def p(v):
    return Tensor(np.array([float(v)]), requires_grad=True)


def test_plain_sgd_step():
    w = p(1.0)
    sgd_momentum_step([w], [np.array([1.0])], None, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert w.data[0] == pytest.approx(0.9)


def test_decay_only_step():
    w = p(1.0)
    sgd_momentum_step([w], [np.array([0.0])], None, lr=1.0, momentum=0.0, weight_decay=3e-4)
    assert w.data[0] == pytest.approx(1 - 3e-4, abs=1e-15)


def test_two_momentum_steps_by_hand():
    w = p(0.0)
    state = None
    for _ in range(2):
        state = sgd_momentum_step([w], [np.array([1.0])], state, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert w.data[0] == pytest.approx(-0.29, abs=1e-14)


def test_sgd_nan_gradient_names_parameter():
    w = Tensor(np.ones(2), requires_grad=True, name="stem.weight")
    with pytest.raises(NumericFault, match="stem.weight"):
        sgd_momentum_step([w], [np.array([np.nan, 0.0])], None, lr=0.1)


def test_adam_first_step_is_lr_sized():
    w = p(0.0)
    adam_step([w], [np.array([1.0])], None, lr=1e-3, beta1=0.5, beta2=0.999, weight_decay=0.0)
    assert w.data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_zero_gradient_keeps_params():
    w = p(0.7)
    adam_step([w], [np.array([0.0])], None, lr=1e-3, weight_decay=0.0)
    assert w.data[0] == 0.7


def test_adam_matches_reference_recurrence_on_quadratic():
    w = p(1.0)
    state = None
    got = []
    for _ in range(3):
        state = adam_step([w], [2 * w.data.copy()], state, lr=3e-4, beta1=0.5, beta2=0.999, weight_decay=1e-3)
        got.append(w.data[0])
    want = adam_reference(1.0, lambda v: 2 * v, 3, 3e-4, 0.5, 0.999, wd=1e-3)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_adam_mask_leaves_other_entries_bitwise():
    a = Tensor(np.array([[0.3, 0.1], [0.2, 1.0]]), requires_grad=True)
    before = a.data.copy()
    mask = np.array([[True, False], [False, False]])
    adam_step([a], [np.ones((2, 2))], None, lr=0.1, masks=[mask])
    assert a.data[0, 0] != before[0, 0]
    assert a.data[~mask].tobytes() == before[~mask].tobytes()


def test_adam_rejects_bad_betas():
    with pytest.raises(ValueError):
        adam_step([p(0)], [np.zeros(1)], None, beta1=1.0)


@pytest.mark.parametrize("step,want", [(0, 0.025), (100, 0.0), (50, 0.0125)])
def test_cosine_schedule_points(step, want):
    assert cosine_lr(step, 100, 0.025, 0.0) == pytest.approx(want, abs=1e-15)


def test_cosine_zero_total_is_an_error():
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.1, 0.0)


def test_cosine_is_monotone():
    lrs = [cosine_lr(s, 30, 0.025, 0.001) for s in range(31)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
