import numpy as np
import pytest

from fdarts.autograd import Tensor, grad_check, record_kinks
from fdarts.nn import max_pool2d, relu
from fdarts.verification import check_attention_block, check_mixed_edge, check_supernet, run_suite


def test_suite_passes_at_default_settings():
    results = run_suite()
    assert [r.name for r in results if not r.passed] == []
    names = {r.name for r in results}
    assert {"se_block", "mixed_edge", "bilevel_quadratic", "xi_sweep", "sigmoid", "conv2d_dense"} <= names


def test_attention_block_and_edge_checks():
    assert check_attention_block().error < 1e-4
    assert check_mixed_edge().error < 1e-4


def test_kink_recorder_sees_relu_and_maxpool():
    x = Tensor(np.array([[[[-1.0, 2.0], [0.5, -0.1]]]]))
    with record_kinks() as pattern:
        max_pool2d(relu(x), 2, 2, 0)
    assert len(pattern) == 2
    np.testing.assert_array_equal(pattern[0], x.data > 0)


def test_kink_skipping_sets_aside_only_straddling_entries():
    # entry 0 sits 5e-4 from the relu kink, entry 1 far from it
    x = Tensor(np.array([5e-4, 1.0]))
    stats = {}
    plain = grad_check(lambda t: relu(t).sum(), x, eps=1e-3)
    skipped = grad_check(lambda t: relu(t).sum(), x, eps=1e-3, skip_kinks=True, stats=stats)
    assert plain == pytest.approx(0.25)
    assert skipped < 1e-10
    assert (stats["checked"], stats["set_aside"]) == (1, 1)
    assert stats["worst_including_set_aside"] == pytest.approx(0.25)


@pytest.mark.slow
def test_supernet_gradients_at_small_step():
    r = check_supernet(eps=1e-5, skip_kinks=False)
    assert r.error < 1e-8
