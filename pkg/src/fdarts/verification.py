"""Gradient verification suite: primitive checks, attention block, mixed edge, bilevel oracles.

Inputs to piecewise-linear primitives are drawn away from their kinks (ReLU
at zero, ties inside a max-pool window) so that central differences at the
default step are not contaminated by switching between linear pieces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autograd import GradientTape, Tensor, apply_primitive, grad_check
from .bilevel import BilevelState, arch_gradient
from .network import NetworkConfig, SearchNetwork
from .nn import (
    Linear,
    Module,
    Norm,
    avg_pool2d,
    concat_channels,
    conv2d,
    cross_entropy,
    dropout_mask_apply,
    global_avgpool,
    linear,
    max_pool2d,
    relu,
    scale_channels,
    sigmoid,
    softmax,
    weighted_sum,
)
from .ops import CANDIDATE_OPS, AttentionBlock, make_candidate_op, se_forward
from .search_space import ArchMatrix, CellSpec, build_arch_matrix, mixed_edge_forward


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.error < self.threshold)


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, low=0.1):
    return rng.uniform(low, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape, gap=0.01):
    """Values whose pairwise gaps all exceed ``gap`` (no ties inside any pooling window)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[Tensor]]]:
    """(name, function, inputs) for every primitive, several attribute settings where it matters."""
    r = rng.standard_normal
    labels = np.array([0, 2, 1])
    keep = (rng.random((2, 1, 1, 1)) > 0.5) / 0.8
    cases = [
        ("add", lambda a, b: a + b, [_t(r((3, 4))), _t(r((1, 4)))]),
        ("mul", lambda a, b: a * b, [_t(r((2, 3, 4))), _t(r((3, 1)))]),
        ("scalar_mul", lambda a: a * 2.5, [_t(r((3, 2)))]),
        ("sum", lambda a: a.sum(), [_t(r((2, 5)))]),
        ("matmul", lambda a, b: a @ b, [_t(r((3, 4))), _t(r((4, 2)))]),
        ("linear", lambda x, w, b: linear(x, w, b), [_t(r((3, 4))), _t(r((2, 4))), _t(r(2))]),
        ("relu", relu, [_t(_away_from_zero(rng, (3, 5)))]),
        ("sigmoid", sigmoid, [_t(3 * r((3, 4)))]),
        ("softmax", lambda x: softmax(x, axis=1), [_t(r((3, 5)))]),
        ("softmax_masked", lambda x: softmax(x, axis=-1, mask=np.array([1, 0, 1, 1, 0], bool)), [_t(r((2, 5)))]),
        ("getitem", lambda x: x[1:, ::2], [_t(r((3, 4)))]),
        ("flatten", lambda x: x.flatten(), [_t(r((2, 3, 2, 2)))]),
        ("concat_channels", lambda a, b: concat_channels([a, b]), [_t(r((2, 1, 3, 3))), _t(r((2, 2, 3, 3)))]),
        ("scale_channels", scale_channels, [_t(r((2, 3, 2, 2))), _t(r((2, 3)))]),
        ("global_avgpool", global_avgpool, [_t(r((2, 3, 3, 2)))]),
        ("dropout_mask_apply", lambda x: dropout_mask_apply(x, keep),
         [_t(r((2, 2, 2, 2)))]),
        ("cross_entropy", lambda z: cross_entropy(z, labels), [_t(r((3, 4)))]),
        ("weighted_sum", lambda w, a, b: weighted_sum(w, [a, b]), [_t(r(2)), _t(r((2, 3))), _t(r((2, 3)))]),
    ]
    norm = Norm(3)
    norm.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
    norm.beta.data[...] = r(3)
    cases.append(("affine_channel_norm", lambda x, g, b: apply_primitive(
        "affine_channel_norm", [x, g, b], {"running": None, "training": True}), [_t(r((4, 3, 2, 2))), norm.gamma,
                                                                               norm.beta]))
    plain = Norm(2, affine=False)
    cases.append(("affine_channel_norm_plain", lambda x: plain(x), [_t(r((3, 2, 3, 3)))]))
    frozen = Norm(3)
    frozen.training = False
    frozen.running_mean[...] = r(3)
    frozen.running_var[...] = rng.uniform(0.5, 2.0, 3)
    cases.append(("affine_channel_norm_eval", lambda x: frozen(x), [_t(r((2, 3, 2, 2)))]))
    for tag, kw, wshape, bias in [
        ("dense", dict(stride=1, padding=1), (3, 2, 3, 3), True),
        ("strided", dict(stride=2, padding=1), (2, 2, 3, 3), False),
        ("dilated_depthwise", dict(stride=1, padding=2, dilation=2, groups=2), (2, 1, 3, 3), False),
        ("strided_depthwise", dict(stride=2, padding=2, groups=2), (2, 1, 5, 5), False),
        ("pointwise_strided", dict(stride=2), (3, 2, 1, 1), False),
        ("grouped", dict(padding=1, groups=2), (4, 1, 3, 3), False),
    ]:
        ins = [_t(r((2, 2, 5, 5))), _t(r(wshape))]
        if bias:
            ins.append(_t(r(wshape[0])))
        cases.append((f"conv2d_{tag}", lambda x, w, b=None, kw=kw: conv2d(x, w, b, **kw), ins))
    cases += [
        ("maxpool2d", lambda x: max_pool2d(x, 3, 1, 1), [_t(_distinct(rng, (2, 2, 4, 4)))]),
        ("maxpool2d_strided", lambda x: max_pool2d(x, 3, 2, 1), [_t(_distinct(rng, (1, 2, 5, 5)))]),
        ("avgpool2d", lambda x: avg_pool2d(x, 3, 1, 1), [_t(r((2, 2, 4, 4)))]),
        ("avgpool2d_include_pad", lambda x: avg_pool2d(x, 3, 2, 1, count_include_pad=True), [_t(r((1, 2, 5, 5)))]),
    ]
    return cases


def check_primitives(eps=1e-3, threshold=1e-4, seed=0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [CheckResult(name, grad_check(f, xs, eps=eps), threshold) for name, f, xs in primitive_cases(rng)]


def check_attention_block(eps=1e-3, threshold=1e-4, seed=0, shape=(1, 4, 2, 2)) -> CheckResult:
    """Whole squeeze-excitation block, differentiated w.r.t. its input and all four parameter tensors."""
    rng = np.random.default_rng(seed)
    block = AttentionBlock(shape[1], rng)
    block.fc1.bias.data[...] = rng.uniform(0.1, 0.3, block.hidden)  # keep the hidden ReLU off its kink
    x = _t(rng.standard_normal(shape))
    params = [block.fc1.weight, block.fc1.bias, block.fc2.weight, block.fc2.bias]
    err = grad_check(lambda x_, *_: se_forward(x_, block), [x] + params, eps=eps)
    return CheckResult("se_block", err, threshold)


def check_mixed_edge(eps=1e-3, threshold=1e-4, seed=0, channels=2, size=6) -> CheckResult:
    """Softmax mixture over the full catalog, differentiated w.r.t. its row of logits."""
    rng = np.random.default_rng(seed)
    arch = build_arch_matrix(CellSpec("normal"), (), rng, init_scale=0.5)
    ops = [make_candidate_op(name, channels, 1, rng, affine=False) for name in CANDIDATE_OPS]
    x = Tensor(rng.standard_normal((2, channels, size, size)))
    row = _t(arch.values.data[0].copy())
    err = grad_check(lambda a: mixed_edge_forward(x, a, ops, arch.valid_mask[0]), [row], eps=eps)
    return CheckResult("mixed_edge", err, threshold)


# ---------------------------------------------------------------------------
# bilevel oracles


def _scalar_arch(value: float) -> ArchMatrix:
    mask = np.ones((1, 1), dtype=bool)
    return ArchMatrix(Tensor(np.array([[value]]), requires_grad=True), 1, 1, ("alpha",), mask, mask.copy(),
                      ("alpha",))


class QuadraticBilevel(Module):
    """L_train = (w - a)^2 and L_val = w^2 behind the model interface the bilevel code expects.

    A batch is ``("train", None)`` or ``("val", None)``.
    """

    def __init__(self, w: float, alpha: float):
        self.w = Tensor(np.array([w]), requires_grad=True)
        self.arch = _scalar_arch(alpha)

    def weights(self):
        return [self.w]

    def arch_parameters(self):
        return [self.arch.values]

    def archs(self):
        return [self.arch]

    def loss(self, split, _labels):
        if split == "train":
            d = self.w - self.arch.values[0]
            return (d * d).sum()
        return (self.w * self.w).sum()


TRAIN, VAL = ("train", None), ("val", None)


def quadratic_hypergradient(w: float, alpha: float, xi: float, order: str = "second") -> float:
    model = QuadraticBilevel(w, alpha)
    state = BilevelState(model, xi=xi, order=order)
    return float(arch_gradient(state, TRAIN, VAL)[0][0, 0])


def quadratic_analytic(w: float, alpha: float, xi: float) -> float:
    """d/da of (w - xi * 2 (w - a))^2."""
    return 4.0 * xi * (w - 2.0 * xi * (w - alpha))


def check_bilevel_quadratic(n=20, seed=0, threshold=1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        w, alpha = rng.uniform(-2, 2, size=2)
        xi = rng.uniform(0.01, 0.3)
        worst = max(worst, abs(quadratic_hypergradient(w, alpha, xi) - quadratic_analytic(w, alpha, xi)))
    return CheckResult("bilevel_quadratic", worst, threshold)


def xi_sweep(w=1.0, alpha=0.0, xis=(0.2, 0.1, 0.05, 0.025, 0.0125, 0.00625)) -> dict:
    """Second-order hypergradient against the first-order one as the inner step shrinks.

    The gap must shrink monotonically towards the first-order value and the
    second-order value must track the analytic unrolled gradient at every step.
    """
    rows = []
    for xi in xis:
        g1 = quadratic_hypergradient(w, alpha, xi, "first")
        g2 = quadratic_hypergradient(w, alpha, xi, "second")
        rows.append({"xi": xi, "first": g1, "second": g2, "gap": abs(g2 - g1),
                     "analytic_error": abs(g2 - quadratic_analytic(w, alpha, xi))})
    gaps = [r["gap"] for r in rows]
    monotone = all(a > b for a, b in zip(gaps, gaps[1:]))
    return {"rows": rows, "monotone": monotone, "max_analytic_error": max(r["analytic_error"] for r in rows)}


class OneEdgeNet(Module):
    """Input -> one mixed edge over the catalog -> global pool -> linear classifier."""

    def __init__(self, channels=2, n_classes=3, rng=None, init_scale=0.3):
        rng = rng if rng is not None else np.random.default_rng(0)
        mask = np.ones((1, len(CANDIDATE_OPS)), dtype=bool)
        values = init_scale * rng.standard_normal((1, len(CANDIDATE_OPS)))
        self.arch = ArchMatrix(Tensor(values, requires_grad=True), 1, len(CANDIDATE_OPS), CANDIDATE_OPS, mask,
                               mask.copy(), ("0->1",))
        self.ops = [make_candidate_op(name, channels, 1, rng, affine=False) for name in CANDIDATE_OPS]
        self.classifier = Linear(channels, n_classes, rng)

    def weights(self):
        return self.parameters()

    def arch_parameters(self):
        return [self.arch.values]

    def archs(self):
        return [self.arch]

    def forward(self, x):
        h = mixed_edge_forward(Tensor(x), self.arch.values[0], self.ops)
        return self.classifier(global_avgpool(h))

    def loss(self, x, y):
        return cross_entropy(self(x), y)


def unrolled_val_loss(model, train_batch, val_batch, xi: float) -> float:
    """L_val(w - xi * dL_train/dw, a) evaluated directly; weights are restored afterwards."""
    weights = model.weights()
    backup = [w.data.copy() for w in weights]
    with GradientTape() as tape:
        loss = model.loss(*train_batch)
    grads = tape.gradient(loss, weights)
    for w, g in zip(weights, grads):
        w.data -= xi * g
    value = model.loss(*val_batch).item()
    for w, b in zip(weights, backup):
        w.data[...] = b
    return value


def whole_map_check(xi=0.05, h=1e-5, seed=0, channels=2, size=6, batch=4) -> dict:
    """Pipeline architecture gradient against central differences of the unrolled validation loss."""
    rng = np.random.default_rng(seed)
    model = OneEdgeNet(channels, 3, rng)
    train = (rng.standard_normal((batch, channels, size, size)), rng.integers(0, 3, batch))
    val = (rng.standard_normal((batch, channels, size, size)), rng.integers(0, 3, batch))
    state = BilevelState(model, xi=xi, order="second")
    pipeline = arch_gradient(state, train, val)[0][0]
    alpha = model.arch.values.data
    numeric = np.zeros_like(pipeline)
    for j in range(alpha.shape[1]):
        orig = alpha[0, j]
        alpha[0, j] = orig + h
        fp = unrolled_val_loss(model, train, val, xi)
        alpha[0, j] = orig - h
        fm = unrolled_val_loss(model, train, val, xi)
        alpha[0, j] = orig
        numeric[j] = (fp - fm) / (2 * h)
    rel = float(np.linalg.norm(pipeline - numeric) / max(np.linalg.norm(numeric), 1e-12))
    return {"pipeline": pipeline, "numeric": numeric, "relative_error": rel}


def run_suite(eps=1e-3, threshold=1e-4, seed=0) -> list[CheckResult]:
    """Everything the ``gradcheck`` command reports."""
    results = check_primitives(eps, threshold, seed)
    results.append(check_attention_block(eps, threshold, seed))
    results.append(check_mixed_edge(eps, threshold, seed))
    results.append(check_bilevel_quadratic(20, seed, threshold))
    sweep = xi_sweep()
    results.append(CheckResult("xi_sweep", 0.0 if sweep["monotone"] else np.inf, threshold))
    return results


def check_supernet(eps=1e-3, threshold=1e-4, seed=0, max_elements=2, arch_elements=8, channels=4, size=8, batch=4,
                   skip_kinks=True) -> CheckResult:
    """Two-cell supernet with attention: loss gradient w.r.t. both matrices and sampled entries of every weight.

    Every evaluation runs the whole network, so only ``arch_elements`` entries
    of each matrix and ``max_elements`` of every weight tensor are perturbed. The network holds thousands of relu units, so at
    eps = 1e-3 some perturbations flip one; those entries are replaced by
    others unless ``skip_kinks`` is off.
    """
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(n_cells=2, init_channels=channels, n_classes=3, input_shape=(1, size, size))
    archs = [build_arch_matrix(CellSpec(kind), rng=rng) for kind in ("normal", "reduction")]
    net = SearchNetwork(cfg, *archs, rng=rng)
    x = rng.random((batch, 1, size, size))
    y = rng.integers(0, 3, batch)
    worst = 0.0
    checked = skipped = 0
    worst_all = 0.0
    n_arch = len(net.arch_parameters())
    for k, t in enumerate(net.arch_parameters() + net.weights()):
        stats = {}
        budget = arch_elements if k < n_arch else max_elements
        err = grad_check(lambda *_: net.loss(x, y), [t], eps=eps, max_elements=budget, seed=seed + k,
                         skip_kinks=skip_kinks, stats=stats)
        worst = max(worst, err)
        checked += stats["checked"]
        skipped += stats["set_aside"]
        worst_all = max(worst_all, stats["worst_including_set_aside"])
    return CheckResult("supernet_2cell", worst, threshold, {"checked": checked, "set_aside": skipped,
                                                            "worst_including_set_aside": worst_all})
