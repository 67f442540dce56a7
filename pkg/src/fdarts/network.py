"""Supernet and discretized evaluation network, stems, auxiliary head, path dropout, checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .genotype import Genotype
from .nn import (
    Conv2d,
    Linear,
    Module,
    Norm,
    avg_pool2d,
    concat_channels,
    count_parameters,
    cross_entropy,
    dropout_mask_apply,
    global_avgpool,
    relu,
)
from .ops import (
    CANDIDATE_OPS,
    SE_REDUCTION,
    AttentionBlock,
    FactorizedReduce,
    ReLUConvBN,
    make_candidate_op,
    op_param_count,
    se_forward,
    se_param_count,
)
from .search_space import ArchMatrix, CellSpec, SearchCell, attach_fixed_block

STEM_MULTIPLIER = 3


class ConfigurationError(ValueError):
    """Inconsistent network or run configuration."""


@dataclass
class NetworkConfig:
    n_cells: int = 4
    init_channels: int = 8
    n_classes: int = 10
    stem: str = "single"
    input_shape: tuple[int, int, int] = (1, 16, 16)
    auxiliary: bool = False
    aux_weight: float = 0.4
    path_dropout_p: float = 0.0
    mode: str = "search"
    attention: bool = True
    dual_kernels: tuple[int, int] = (3, 5)
    se_reduction: int = SE_REDUCTION
    aux_hidden: int = 128

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.dual_kernels = tuple(self.dual_kernels)
        self.validate()

    @property
    def reduction_positions(self) -> list[int]:
        return sorted({self.n_cells // 3, 2 * self.n_cells // 3})

    @property
    def aux_position(self) -> int:
        return 2 * self.n_cells // 3

    def validate(self):
        if self.mode not in ("search", "eval"):
            raise ConfigurationError(f"mode must be search or eval, got {self.mode!r}")
        if self.stem not in ("single", "dual"):
            raise ConfigurationError(f"stem must be single or dual, got {self.stem!r}")
        if self.n_cells < 1 or self.init_channels < 1 or self.n_classes < 2:
            raise ConfigurationError("n_cells, init_channels must be positive and n_classes >= 2")
        if not 0.0 <= self.path_dropout_p < 1.0:
            raise ConfigurationError(f"path_dropout_p must lie in [0, 1), got {self.path_dropout_p}")
        if self.mode == "search" and (self.auxiliary or self.path_dropout_p > 0):
            raise ConfigurationError("auxiliary tower and path dropout are train-time features; not allowed in search mode")
        if any(k % 2 == 0 for k in self.dual_kernels):
            raise ConfigurationError(f"stem kernels must be odd, got {self.dual_kernels}")
        _, h, w = self.input_shape
        for _ in self.reduction_positions:
            if h < 2 or w < 2 or h % 2 or w % 2:
                raise ConfigurationError(
                    f"input {self.input_shape[1:]} too small for {len(self.reduction_positions)} reductions"
                )
            h, w = h // 2, w // 2
        if self.auxiliary and self.aux_position >= self.n_cells - 1:
            raise ConfigurationError("auxiliary tower needs at least one cell after its attachment point")


class Stem(Module):
    def __init__(self, cin, cout, kernel, rng):
        self.conv = Conv2d(cin, cout, kernel, rng, padding=kernel // 2)
        self.norm = Norm(cout)

    def forward(self, x):
        return self.norm(self.conv(x))


class _StemMixin:
    def _build_stems(self, config: NetworkConfig, rng):
        cin = config.input_shape[0]
        c_stem = STEM_MULTIPLIER * config.init_channels
        if config.stem == "single":
            self.stem = Stem(cin, c_stem, 3, rng)
            self.stem_b = None
        else:
            k0, k1 = config.dual_kernels
            self.stem = Stem(cin, c_stem, k0, rng)
            self.stem_b = Stem(cin, c_stem, k1, rng)
        return c_stem

    def stem_forward(self, x):
        s0 = self.stem(x)
        s1 = s0 if self.stem_b is None else self.stem_b(x)
        return s0, s1


def stem_forward(net, x):
    """(s0, s1) fed to the first cell: one shared stem or two distinct transformations."""
    return net.stem_forward(_as_tensor(x))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class SearchNetwork(_StemMixin, Module):
    """Stacked continuous-relaxation cells, each followed by the fixed attention block."""

    def __init__(self, config: NetworkConfig, arch_normal: ArchMatrix, arch_reduce: ArchMatrix,
                 rng: np.random.Generator | None = None):
        if config.mode != "search":
            raise ConfigurationError("SearchNetwork requires mode='search'")
        if bool(arch_normal.fixed_spec) != bool(arch_reduce.fixed_spec):
            raise ConfigurationError("normal and reduction matrices disagree on the fixed block")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.arch_normal, self.arch_reduce = arch_normal, arch_reduce
        self.attention = bool(arch_normal.fixed_spec)
        ops = arch_normal.learnable_ops
        c_stem = self._build_stems(config, rng)
        c_pp, c_p, c = c_stem, c_stem, config.init_channels
        reduction_prev = False
        self.cells, self.attn = [], []
        for i in range(config.n_cells):
            red = i in config.reduction_positions
            if red:
                c *= 2
            spec = CellSpec("reduction" if red else "normal")
            cell = SearchCell(spec, c_pp, c_p, c, reduction_prev, rng, ops=ops, affine=False)
            self.cells.append(cell)
            self.attn.append(AttentionBlock(cell.out_channels, rng, config.se_reduction) if self.attention else None)
            reduction_prev = red
            c_pp, c_p = c_p, cell.out_channels
        self.classifier = Linear(c_p, config.n_classes, rng)

    def weights(self) -> list[Tensor]:
        return self.parameters()

    def arch_parameters(self) -> list[Tensor]:
        return [self.arch_normal.values, self.arch_reduce.values]

    def archs(self) -> list[ArchMatrix]:
        return [self.arch_normal, self.arch_reduce]

    def forward(self, x):
        s0, s1 = self.stem_forward(_as_tensor(x))
        for cell, block in zip(self.cells, self.attn):
            arch = self.arch_reduce if cell.spec.reduction else self.arch_normal
            out = attach_fixed_block(cell(s0, s1, arch), arch, block)
            s0, s1 = s1, out
        return self.classifier(global_avgpool(s1))

    def loss(self, x, y):
        return cross_entropy(self(x), y)


def path_dropout(outputs, p: float, rng: np.random.Generator | None, training: bool = True):
    """Zero each sample's edge output with probability ``p``; survivors are scaled by 1/(1-p)."""
    if not training or p == 0.0:
        return list(outputs)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {p}")
    masked = []
    for t in outputs:
        keep = rng.random((t.shape[0],) + (1,) * (t.ndim - 1)) >= p
        masked.append(dropout_mask_apply(t, keep.astype(t.data.dtype) / (1.0 - p)))
    return masked


class EvalCell(Module):
    def __init__(self, genotype: Genotype, reduction: bool, c_pp, c_p, c, reduction_prev, rng):
        self.reduction = reduction
        self.channels = c
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(c_pp, c, rng)
        else:
            self.preprocess0 = ReLUConvBN(c_pp, c, 1, 1, 0, rng)
        self.preprocess1 = ReLUConvBN(c_p, c, 1, 1, 0, rng)
        pairs = genotype.reduce if reduction else genotype.normal
        self.concat = tuple(genotype.reduce_concat if reduction else genotype.normal_concat)
        self.sources = [src for _, src in pairs]
        self.ops = [make_candidate_op(name, c, 2 if reduction and src < 2 else 1, rng) for name, src in pairs]

    @property
    def out_channels(self):
        return len(self.concat) * self.channels

    def forward(self, s0, s1, drop_p=0.0, rng=None):
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        for k in range(len(self.ops) // 2):
            hs = []
            for slot in (2 * k, 2 * k + 1):
                op = self.ops[slot]
                h = op(states[self.sources[slot]])
                identity = op.name == "skip_connect" and op.stride == 1
                if self.training and drop_p > 0 and not identity:
                    h = path_dropout([h], drop_p, rng)[0]
                hs.append(h)
            states.append(hs[0] + hs[1])
        return concat_channels([states[i] for i in self.concat])


class AuxiliaryHead(Module):
    def __init__(self, c, n_classes, rng, hidden=128):
        self.conv = Conv2d(c, hidden, 1, rng)
        self.norm = Norm(hidden)
        self.classifier = Linear(hidden, n_classes, rng)

    def forward(self, x):
        x = avg_pool2d(relu(x), 5, 3, 2, count_include_pad=False)
        x = relu(self.norm(self.conv(x)))
        return self.classifier(global_avgpool(x))


class EvalNetwork(_StemMixin, Module):
    """Network built from a discrete genotype; attention after every cell when enabled."""

    def __init__(self, config: NetworkConfig, genotype: Genotype, rng: np.random.Generator | None = None):
        if config.mode != "eval":
            raise ConfigurationError("EvalNetwork requires mode='eval'")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.genotype = genotype
        self.drop_rng = np.random.default_rng(rng.integers(2**63))
        c_stem = self._build_stems(config, rng)
        c_pp, c_p, c = c_stem, c_stem, config.init_channels
        reduction_prev = False
        self.cells, self.attn = [], []
        self.aux_head = None
        for i in range(config.n_cells):
            red = i in config.reduction_positions
            if red:
                c *= 2
            cell = EvalCell(genotype, red, c_pp, c_p, c, reduction_prev, rng)
            self.cells.append(cell)
            self.attn.append(AttentionBlock(cell.out_channels, rng, config.se_reduction) if config.attention else None)
            reduction_prev = red
            c_pp, c_p = c_p, cell.out_channels
            if config.auxiliary and i == config.aux_position:
                self.aux_head = AuxiliaryHead(c_p, config.n_classes, rng, config.aux_hidden)
        self.classifier = Linear(c_p, config.n_classes, rng)

    def weights(self) -> list[Tensor]:
        return self.parameters()

    def forward(self, x, return_aux=False):
        s0, s1 = self.stem_forward(_as_tensor(x))
        drop_p = self.config.path_dropout_p if self.training else 0.0
        aux = None
        for i, (cell, block) in enumerate(zip(self.cells, self.attn)):
            out = cell(s0, s1, drop_p, self.drop_rng)
            if block is not None:
                out = se_forward(out, block)
            s0, s1 = s1, out
            if self.aux_head is not None and self.training and i == self.config.aux_position:
                aux = self.aux_head(s1)
        logits = self.classifier(global_avgpool(s1))
        return (logits, aux) if return_aux else logits

    def loss(self, x, y):
        logits, aux = self(x, return_aux=True)
        if aux is None:
            return cross_entropy(logits, y)
        return auxiliary_loss(logits, aux, y, self.config.aux_weight)


def auxiliary_loss(logits_main, logits_aux, labels, aux_weight: float):
    main = cross_entropy(logits_main, labels)
    if aux_weight == 0.0 or logits_aux is None:
        return main
    return main + cross_entropy(logits_aux, labels) * aux_weight


def build_network(config: NetworkConfig, arch_or_genotype, rng: np.random.Generator | None = None):
    if config.mode == "search":
        if not (isinstance(arch_or_genotype, (tuple, list)) and all(isinstance(a, ArchMatrix) for a in arch_or_genotype)):
            raise ConfigurationError("search mode needs a (normal, reduction) pair of ArchMatrix")
        return SearchNetwork(config, *arch_or_genotype, rng=rng)
    if not isinstance(arch_or_genotype, Genotype):
        raise ConfigurationError("eval mode needs a Genotype")
    return EvalNetwork(config, arch_or_genotype, rng=rng)


# ---------------------------------------------------------------------------
# closed-form parameter counting


def _relu_conv_bn_count(cin, cout, affine):
    return cin * cout + (2 * cout if affine else 0)


def _fr_count(cin, cout, affine):
    return 2 * cin * (cout // 2) + (2 * cout if affine else 0)


def expected_param_count(config: NetworkConfig, genotype: Genotype | None = None,
                         ops=CANDIDATE_OPS, attention: bool | None = None) -> int:
    """Parameter total derived from the per-op closed forms, without instantiating anything."""
    attention = config.attention if attention is None else attention
    affine = config.mode == "eval"
    cin = config.input_shape[0]
    c_stem = STEM_MULTIPLIER * config.init_channels
    kernels = (3,) if config.stem == "single" else config.dual_kernels
    total = sum(cin * c_stem * k * k + 2 * c_stem for k in kernels)
    c_pp, c_p, c = c_stem, c_stem, config.init_channels
    reduction_prev = False
    n_inter = 4
    for i in range(config.n_cells):
        red = i in config.reduction_positions
        if red:
            c *= 2
        total += _fr_count(c_pp, c, affine) if reduction_prev else _relu_conv_bn_count(c_pp, c, affine)
        total += _relu_conv_bn_count(c_p, c, affine)
        if genotype is None:
            for src, _ in CellSpec().edges:
                stride = 2 if red and src < 2 else 1
                total += sum(op_param_count(name, c, stride, affine) for name in ops)
            out_c = n_inter * c
        else:
            pairs = genotype.reduce if red else genotype.normal
            for name, src in pairs:
                total += op_param_count(name, c, 2 if red and src < 2 else 1, affine)
            out_c = len(genotype.reduce_concat if red else genotype.normal_concat) * c
        if attention:
            total += se_param_count(out_c, config.se_reduction)
        reduction_prev = red
        c_pp, c_p = c_p, out_c
        if config.mode == "eval" and config.auxiliary and i == config.aux_position:
            h = config.aux_hidden
            total += c_p * h + 2 * h + h * config.n_classes + config.n_classes
    total += c_p * config.n_classes + config.n_classes
    return total


# ---------------------------------------------------------------------------
# summary and checkpoints


def network_summary(net) -> dict:
    """Per-cell output shapes and parameter counts from a forward pass on a zero batch."""
    was_training = net.training
    net.eval()
    x = Tensor(np.zeros((2,) + tuple(net.config.input_shape)))
    layers = []
    s0, s1 = net.stem_forward(x)
    layers.append({"name": "stem", "output_shape": list(s0.shape),
                   "params": count_parameters(net.stem) + (count_parameters(net.stem_b) if net.stem_b else 0)})
    for i, (cell, block) in enumerate(zip(net.cells, net.attn)):
        if isinstance(net, SearchNetwork):
            arch = net.arch_reduce if cell.spec.reduction else net.arch_normal
            out = attach_fixed_block(cell(s0, s1, arch), arch, block)
            kind = cell.spec.kind
        else:
            out = cell(s0, s1)
            if block is not None:
                out = se_forward(out, block)
            kind = "reduction" if cell.reduction else "normal"
        layers.append({"name": f"cell{i}", "kind": kind, "output_shape": list(out.shape),
                       "params": count_parameters(cell),
                       "attention_params": count_parameters(block) if block is not None else 0})
        s0, s1 = s1, out
    aux = getattr(net, "aux_head", None)
    if aux is not None:
        layers.append({"name": "aux_head", "params": count_parameters(aux)})
    layers.append({"name": "classifier", "output_shape": [2, net.config.n_classes],
                   "params": count_parameters(net.classifier)})
    net.train(was_training)
    cfg = asdict(net.config)
    return {"config": cfg, "layers": layers, "total_params": count_parameters(net)}


def _state_items(net):
    for name, p in net.named_parameters():
        yield name, "param", p.data
    for name, b in net.named_buffers():
        yield name, "buffer", b


def save_checkpoint(net, path) -> tuple[Path, Path]:
    """Flat little-endian float64 blob plus a JSON manifest of name -> (shape, offset)."""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    manifest = {"dtype": "<f8", "tensors": {}}
    offset = 0
    with open(bin_path, "wb") as fh:
        for name, kind, arr in _state_items(net):
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())
            manifest["tensors"][name] = {"shape": list(arr.shape), "offset": offset, "kind": kind}
            offset += data.size
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(manifest, indent=1))
    return bin_path, json_path


def load_checkpoint(net, path) -> None:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    entries = manifest["tensors"]
    for name, kind, arr in _state_items(net):
        if name not in entries:
            raise KeyError(f"checkpoint lacks tensor {name!r}")
        e = entries[name]
        if tuple(e["shape"]) != arr.shape:
            raise ValueError(f"checkpoint shape {e['shape']} for {name!r} != {list(arr.shape)}")
        arr[...] = blob[e["offset"]:e["offset"] + arr.size].reshape(arr.shape)
