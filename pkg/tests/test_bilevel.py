import numpy as np
import pytest

from fdarts.autograd import Tensor
from fdarts.bilevel import (
    BilevelState,
    ContractViolation,
    arch_gradient,
    arch_step,
    masked_arch_update,
    search_epoch,
    virtual_step,
    weight_step,
)
from fdarts.nn import Module
from fdarts.network import NetworkConfig, SearchNetwork
from fdarts.search_space import ATTENTION_SPEC, ArchMatrix, CellSpec, build_arch_matrix
from fdarts.verification import (
    TRAIN,
    VAL,
    QuadraticBilevel,
    check_bilevel_quadratic,
    quadratic_analytic,
    quadratic_hypergradient,
    whole_map_check,
    xi_sweep,
)


class ScalarModel(Module):
    """L_train = (w - 2)^2 with one inert architecture entry."""

    def __init__(self, w):
        self.w = Tensor(np.array([float(w)]), requires_grad=True)
        mask = np.ones((1, 1), bool)
        self.arch = ArchMatrix(Tensor(np.zeros((1, 1)), requires_grad=True), 1, 1, ("a",), mask, mask.copy())

    def weights(self):
        return [self.w]

    def arch_parameters(self):
        return [self.arch.values]

    def archs(self):
        return [self.arch]

    def loss(self, _x, _y):
        d = self.w - 2.0
        return (d * d).sum() + (self.arch.values * 0.0).sum()


class TwoParamModel(ScalarModel):
    """L_train = 0.5 * (w0^2 + 3 w1^2): gradient (w0, 3 w1)."""

    def __init__(self):
        super().__init__(0.0)
        self.w = Tensor(np.array([1.0, -2.0]), requires_grad=True)

    def loss(self, _x, _y):
        return (self.w * self.w * Tensor(np.array([0.5, 1.5]))).sum() + (self.arch.values * 0.0).sum()


BATCH = (np.zeros(1), np.zeros(1, dtype=int))


def test_weight_step_with_zero_lr_keeps_weights():
    m = ScalarModel(0.3)
    weight_step(BilevelState(m), BATCH, lr=0.0)
    assert m.w.data[0] == 0.3


def test_virtual_step_closed_form():
    m = ScalarModel(0.0)
    virtual_step(m, BATCH, 0.25)
    assert m.w.data[0] == pytest.approx(1.0)


def test_weight_step_follows_momentum_recurrence():
    m = TwoParamModel()
    state = BilevelState(m, momentum=0.9, weight_decay=0.0)
    w, v = np.array([1.0, -2.0]), np.zeros(2)
    for _ in range(3):
        weight_step(state, BATCH, lr=0.1)
        v = 0.9 * v + w * np.array([1.0, 3.0])
        w = w - 0.1 * v
    np.testing.assert_allclose(m.w.data, w, atol=1e-15)


def test_weight_step_rejects_empty_batch():
    with pytest.raises(ValueError):
        weight_step(BilevelState(ScalarModel(0)), (np.zeros(0), np.zeros(0)))


def test_quadratic_reference_value():
    assert quadratic_analytic(1.0, 0.0, 0.1) == pytest.approx(0.32)
    assert quadratic_hypergradient(1.0, 0.0, 0.1) == pytest.approx(0.32, abs=1e-4)


def test_quadratic_twenty_random_triples():
    r = check_bilevel_quadratic(20)
    assert r.passed, r


def test_xi_zero_equals_first_order():
    for xi in (0.0,):
        a = quadratic_hypergradient(0.7, -0.4, xi, "second")
        b = quadratic_hypergradient(0.7, -0.4, 0.3, "first")
        assert a == b


def test_xi_zero_on_supernet_is_exactly_first_order(rng):
    net = tiny_supernet(rng)
    batch = (rng.random((2, 1, 4, 4)), rng.integers(0, 2, 2))
    g0 = arch_gradient(BilevelState(net, xi=0.0, order="second"), batch, batch)
    g1 = arch_gradient(BilevelState(net, xi=0.025, order="first"), batch, batch)
    for a, b in zip(g0, g1):
        assert a.tobytes() == b.tobytes()


def test_second_order_approaches_first_as_xi_shrinks():
    sweep = xi_sweep(xis=(1e-2, 1e-3, 1e-4))
    assert sweep["monotone"]
    assert sweep["max_analytic_error"] < 1e-4


def test_whole_map_oracle():
    assert whole_map_check()["relative_error"] < 1e-3


def test_zero_validation_gradient_skips_correction():
    m = QuadraticBilevel(0.0, 0.0)  # dL_val/dw' = 2 w' = 0 at w = a = 0
    state = BilevelState(m, xi=0.1)
    g = arch_gradient(state, TRAIN, VAL)
    assert g[0][0, 0] == 0.0
    assert state.diagnostics and "skipped" in state.diagnostics[0]


def test_arch_gradient_zero_outside_learnable_block(rng):
    net = tiny_supernet(rng, n_cells=3)  # with two cells both are reductions
    batch = (rng.random((2, 1, 4, 4)), rng.integers(0, 2, 2))
    for order in ("first", "second"):
        for g, a in zip(arch_gradient(BilevelState(net, order=order), batch, batch), net.archs()):
            assert not g[~a.learnable_mask].any()
            assert g[a.learnable_mask].any()


def test_masked_update_gamma_zero_is_bitwise_noop(rng):
    a = build_arch_matrix(CellSpec(), ATTENTION_SPEC, rng)
    before = a.values.data.copy()
    g = np.where(a.learnable_mask, rng.standard_normal(a.shape), 0.0)
    masked_arch_update(a, g, 0.0)
    assert a.values.data.tobytes() == before.tobytes()


def test_masked_update_two_by_two_plain_descent():
    vals = np.array([[0.5, 0.0], [0.0, 1.0]])
    learn = np.array([[True, False], [False, False]])
    a = ArchMatrix(Tensor(vals.copy(), requires_grad=True), 1, 1, ("x", "y"), learn | np.eye(2, dtype=bool), learn)
    masked_arch_update(a, np.array([[1.0, 0.0], [0.0, 0.0]]), 0.1, mode="sgd")
    np.testing.assert_array_equal(a.values.data, [[0.4, 0.0], [0.0, 1.0]])


def test_masked_update_rejects_gradient_outside_mask(rng):
    a = build_arch_matrix(CellSpec(), ATTENTION_SPEC, rng)
    g = np.zeros(a.shape)
    g[15, 2] = 1e-9
    with pytest.raises(ContractViolation):
        masked_arch_update(a, g, 0.1)


def test_masked_update_thousand_random_adam_steps(rng):
    a = build_arch_matrix(CellSpec(), ATTENTION_SPEC, rng)
    before = a.values.data.copy()
    state = None
    for _ in range(1000):
        g = np.where(a.learnable_mask, rng.standard_normal(a.shape), 0.0)
        _, state = masked_arch_update(a, g, 3e-4, state)
    assert a.values.data[14:].tobytes() == before[14:].tobytes()
    assert a.values.data[:14, 8:].tobytes() == before[:14, 8:].tobytes()
    assert not np.array_equal(a.values.data[:14, :8], before[:14, :8])


def tiny_supernet(rng, attention=True, n_cells=2):
    cfg = NetworkConfig(n_cells=n_cells, init_channels=2, n_classes=2, input_shape=(1, 4, 4))
    fixed = ATTENTION_SPEC if attention else ()
    archs = [build_arch_matrix(CellSpec(k), fixed, rng) for k in ("normal", "reduction")]
    return SearchNetwork(cfg, *archs, rng=rng)


def batches(rng, n, shape=(2, 1, 4, 4)):
    return [(rng.random(shape), rng.integers(0, 2, shape[0])) for _ in range(n)]


def test_search_epoch_zero_batches_changes_nothing(rng):
    net = tiny_supernet(rng)
    state = BilevelState(net)
    before = [w.data.copy() for w in net.weights()] + [a.data.copy() for a in net.arch_parameters()]
    assert search_epoch(state, [], []) == {}
    after = [w.data for w in net.weights()] + [a.data for a in net.arch_parameters()]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(before, after))
    assert state.epoch == 0


def test_search_epoch_gamma_zero_only_moves_weights(rng):
    net = tiny_supernet(rng)
    state = BilevelState(net, gamma=0.0)
    arch_before = [a.data.copy() for a in net.arch_parameters()]
    w_before = [w.data.copy() for w in net.weights()]
    m = search_epoch(state, batches(rng, 1), batches(rng, 1))
    assert all(a.data.tobytes() == b.tobytes() for a, b in zip(net.arch_parameters(), arch_before))
    assert any(w.data.tobytes() != b.tobytes() for w, b in zip(net.weights(), w_before))
    assert set(m) >= {"train_loss", "val_loss", "val_acc", "mean_row_entropy"}


def test_search_epoch_short_stream_is_flagged(rng):
    state = BilevelState(tiny_supernet(rng))
    m = search_epoch(state, batches(rng, 2), batches(rng, 1))
    assert m["short_epoch"] is True


def test_arch_update_happens_before_weight_update(rng):
    # the architecture gradient of the first pair must be computed at the initial weights
    net = tiny_supernet(rng)
    tb, vb = batches(rng, 1)[0], batches(rng, 1)[0]
    probe = tiny_supernet(np.random.default_rng(0))
    for p, q in zip(probe.weights() + probe.arch_parameters(), net.weights() + net.arch_parameters()):
        p.data[...] = q.data
    expected = arch_gradient(BilevelState(probe, order="first"), tb, vb)
    state = BilevelState(net, order="first", gamma=0.1, arch_weight_decay=0.0)
    search_epoch(state, [tb], [vb])
    # first Adam step moves by -gamma * sign(g) on every non-zero entry
    step = net.archs()[0].values.data - probe.archs()[0].values.data
    sel = expected[0] != 0
    np.testing.assert_allclose(step[sel], -0.1 * np.sign(expected[0][sel]), rtol=1e-6)


def test_fixed_rows_unchanged_over_many_steps(rng):
    net = tiny_supernet(rng)
    init = [a.values.data.copy() for a in net.archs()]
    state = BilevelState(net, gamma=0.05, order="first")
    for _ in range(3):
        search_epoch(state, batches(rng, 3), batches(rng, 3))
    for a, b in zip(net.archs(), init):
        assert a.values.data[~a.learnable_mask].tobytes() == b[~a.learnable_mask].tobytes()


def test_uniform_row_shift_leaves_forward_unchanged(rng):
    net = tiny_supernet(rng)
    net.eval()
    x = rng.random((2, 1, 4, 4))
    base = net(x).data
    a = net.archs()[0]
    a.values.data[3, : a.n] += 7.25
    np.testing.assert_allclose(net(x).data, base, atol=1e-12)


def test_invalid_order_and_negative_xi():
    with pytest.raises(ValueError):
        BilevelState(ScalarModel(0), order="third")
    with pytest.raises(ValueError):
        BilevelState(ScalarModel(0), xi=-1.0)


def test_arch_step_updates_learnable_block_only(rng):
    net = tiny_supernet(rng)
    init = [a.values.data.copy() for a in net.archs()]
    b = batches(rng, 1)[0]
    arch_step(BilevelState(net, order="second"), b, b)
    for a, i in zip(net.archs(), init):
        assert not np.array_equal(a.values.data[a.learnable_mask], i[a.learnable_mask])
        assert a.values.data[~a.learnable_mask].tobytes() == i[~a.learnable_mask].tobytes()
