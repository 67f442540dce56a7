import threading

import numpy as np
import pytest

from fdarts.autograd import (
    PRIMITIVES,
    CatalogError,
    DeterminismError,
    DimensionError,
    GradientTape,
    TapeError,
    Tensor,
    apply_primitive,
    backward,
    grad_check,
    inject_fault,
)
from fdarts.nn import (
    conv2d,
    cross_entropy,
    global_avgpool,
    linear,
    relu,
    sigmoid,
    softmax,
)
from fdarts.verification import primitive_cases

from oracles import conv2d_loops


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_catalog_covers_required_primitives():
    required = {"add", "mul", "matmul", "conv2d", "relu", "sigmoid", "softmax", "avgpool2d", "maxpool2d",
                "global_avgpool", "affine_channel_norm", "concat_channels", "scale_channels", "flatten",
                "linear", "cross_entropy", "scalar_mul", "dropout_mask_apply"}
    assert required <= set(PRIMITIVES)


def test_unknown_primitive_is_a_catalog_error():
    with pytest.raises(CatalogError):
        apply_primitive("fft", [Tensor(np.ones(2))])


def test_matmul_shape_rule():
    assert (Tensor(np.ones((2, 3))) @ Tensor(np.ones((3, 4)))).shape == (2, 4)


def test_matmul_mismatch_names_primitive():
    with pytest.raises(DimensionError, match="matmul"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


def test_conv_rejects_channel_mismatch():
    with pytest.raises(DimensionError, match="conv2d"):
        conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))), padding=1)


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(3)), axis=0).data, np.full(3, 1 / 3), atol=1e-15)


def test_softmax_rows_are_probability_vectors(rng):
    p = softmax(Tensor(30 * rng.standard_normal((50, 7))), axis=1).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_masked_softmax_gives_zero_weight_to_masked_columns():
    p = softmax(Tensor(np.array([1.0, 5.0, 2.0])), axis=0, mask=np.array([True, False, True])).data
    assert p[1] == 0.0
    np.testing.assert_allclose(p[[0, 2]], np.exp([1, 2]) / np.exp([1, 2]).sum())


@pytest.mark.parametrize("stride,padding,dilation,groups,wshape", [
    (1, 1, 1, 1, (4, 2, 3, 3)),
    (2, 1, 1, 1, (3, 2, 3, 3)),
    (1, 2, 2, 2, (2, 1, 3, 3)),
    (2, 2, 1, 2, (2, 1, 5, 5)),
    (1, 0, 1, 1, (3, 2, 1, 1)),
    (2, 0, 1, 1, (3, 2, 1, 1)),
    (1, 4, 2, 2, (2, 1, 5, 5)),
    (1, 1, 1, 2, (4, 1, 3, 3)),
])
def test_conv2d_matches_nested_loop_oracle(rng, stride, padding, dilation, groups, wshape):
    x = rng.standard_normal((2, 2, 7, 7))
    w = rng.standard_normal(wshape)
    b = rng.standard_normal(wshape[0])
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation, groups).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, padding, dilation, groups), atol=1e-12)


def test_conv2d_reference_example(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((4, 2, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), padding=1).data
    assert out.shape == (1, 4, 8, 8)
    np.testing.assert_allclose(out, conv2d_loops(x, w, padding=1), atol=1e-12)


def test_sum_of_squares_gradient():
    x = leaf([1.0, 2.0, 3.0])
    with GradientTape() as tape:
        loss = (x * x).sum()
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_cross_entropy_gradient_at_zero_logits():
    z = leaf([[0.0, 0.0]])
    with GradientTape() as tape:
        loss = cross_entropy(z, np.array([0]))
    (g,) = tape.gradient(loss, [z])
    np.testing.assert_allclose(g, [[-0.5, 0.5]], atol=1e-15)


def test_fan_out_accumulates_additively(rng):
    x = leaf(rng.standard_normal(5))
    with GradientTape() as tape:
        loss = (sigmoid(x) + x * x).sum()
    (g,) = tape.gradient(loss, [x])
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(g, s * (1 - s) + 2 * x.data, atol=1e-14)


def test_non_scalar_loss_is_rejected():
    x = leaf(np.ones(3))
    with GradientTape() as tape:
        y = x * 2.0
    with pytest.raises(TapeError, match="scalar"):
        tape.gradient(y)


def test_replaying_a_tape_twice_is_an_error():
    x = leaf(np.ones(3))
    with GradientTape() as tape:
        loss = (x * x).sum()
    tape.gradient(loss)
    with pytest.raises(TapeError):
        tape.gradient(loss)


def test_reset_releases_saved_nodes_and_allows_reuse():
    x = leaf(np.ones(3))
    tape = GradientTape()
    with tape:
        (x * x).sum()
    assert tape.nodes
    tape.reset()
    assert not tape.nodes and not tape.frozen
    with tape:
        loss = (x * 3.0).sum()
    np.testing.assert_array_equal(tape.gradient(loss, [x])[0], [3.0, 3.0, 3.0])


def test_gradient_releases_activations_after_backward():
    x = leaf(np.ones(3))
    with GradientTape() as tape:
        loss = (x * x).sum()
    tape.gradient(loss)
    assert tape.nodes == []


def test_no_node_recorded_without_grad_inputs():
    with GradientTape() as tape:
        Tensor(np.ones(3)) * Tensor(np.ones(3))
    assert tape.nodes == []


def test_unused_source_gets_zero_gradient():
    x, y = leaf(np.ones(2)), leaf(np.ones(3))
    with GradientTape() as tape:
        loss = (x * x).sum()
    gx, gy = tape.gradient(loss, [x, y])
    np.testing.assert_array_equal(gy, 0.0)


def test_tapes_are_thread_local():
    results = {}

    def work(k):
        x = leaf(np.full(4, float(k)))
        with GradientTape() as tape:
            loss = (x * x).sum()
        results[k] = tape.gradient(loss, [x])[0]

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k, g in results.items():
        np.testing.assert_array_equal(g, np.full(4, 2.0 * k))


def test_grad_check_identity_is_exact():
    assert grad_check(lambda x: x, leaf(np.linspace(-1, 1, 6))) < 1e-12


def test_grad_check_sigmoid_at_zero():
    # central-difference truncation is |f'''(0)| eps^2 / 6 = eps^2 / 48
    assert grad_check(sigmoid, leaf([0.0]), eps=1e-4) < 1e-8
    assert grad_check(sigmoid, leaf([0.0]), eps=1e-3) == pytest.approx(1e-6 / 48, rel=1e-3)


def test_grad_check_detects_nondeterminism():
    rng = np.random.default_rng(0)
    with pytest.raises(DeterminismError):
        grad_check(lambda x: x * float(rng.random()), leaf(np.ones(3)))


def test_grad_check_catches_a_wrong_backward():
    with inject_fault("sigmoid"):
        assert grad_check(lambda x: sigmoid(x).sum(), leaf([0.3, -0.2])) > 0.4


def test_grad_check_restores_requires_grad_flag():
    x = Tensor(np.ones(2))
    grad_check(lambda t: t * 2.0, x)
    assert x.requires_grad is False


def test_inject_fault_is_scoped():
    x = leaf([0.5])
    with inject_fault("relu"):
        with GradientTape() as tape:
            loss = relu(x).sum()
        assert tape.gradient(loss, [x])[0][0] == -1.0
    with GradientTape() as tape:
        loss = relu(x).sum()
    assert tape.gradient(loss, [x])[0][0] == 1.0


def test_inject_fault_rejects_unknown_primitive():
    with pytest.raises(CatalogError):
        with inject_fault("nope"):
            pass


@pytest.mark.parametrize("case", primitive_cases(np.random.default_rng(3)), ids=lambda c: c[0])
def test_every_primitive_passes_grad_check(case):
    _, f, xs = case
    assert grad_check(f, xs, eps=1e-3) < 1e-4


def test_three_layer_network_gradients(rng):
    w1, b1 = leaf(0.5 * rng.standard_normal((6, 4))), leaf(0.1 * rng.standard_normal(6))
    w2, b2 = leaf(0.5 * rng.standard_normal((5, 6))), leaf(0.1 * rng.standard_normal(5))
    w3, b3 = leaf(0.5 * rng.standard_normal((3, 5))), leaf(0.1 * rng.standard_normal(3))
    x = Tensor(rng.standard_normal((8, 4)))
    labels = rng.integers(0, 3, 8)

    def net(*ps):
        h = sigmoid(linear(x, ps[0], ps[1]))
        h = sigmoid(linear(h, ps[2], ps[3]))
        return cross_entropy(linear(h, ps[4], ps[5]), labels)

    assert grad_check(net, [w1, b1, w2, b2, w3, b3], eps=1e-3) < 1e-4


def test_forward_backward_bitwise_deterministic(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))

    def run():
        xt, wt = leaf(x), leaf(w)
        with GradientTape() as tape:
            loss = global_avgpool(relu(conv2d(xt, wt, padding=1))).sum()
        return loss.data.copy(), tape.gradient(loss, [xt, wt])

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes()
    for a, b in zip(g1, g2):
        assert a.tobytes() == b.tobytes()
