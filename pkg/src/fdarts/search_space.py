"""Cell DAG, the extended architecture matrix and the continuous-relaxation cell."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autograd import DimensionError, Tensor
from .nn import Module, concat_channels, softmax, weighted_sum
from .ops import (
    CANDIDATE_OPS,
    AttentionBlock,
    CandidateOp,
    FactorizedReduce,
    ReLUConvBN,
    make_candidate_op,
    se_forward,
)

N_INTERMEDIATE = 4

# squeeze -> excitation -> channel scaling, each one fixed connection
ATTENTION_OPS = ("global_avgpool", "fc_excitation", "channel_scale")


class ArchError(ValueError):
    """Malformed architecture matrix or fixed-operation specification."""


@dataclass(frozen=True)
class FixedConnection:
    source: str
    dest: str
    op: str


ATTENTION_SPEC = (
    FixedConnection("cell_out", "squeeze", "global_avgpool"),
    FixedConnection("squeeze", "excite", "fc_excitation"),
    FixedConnection("excite", "attended", "channel_scale"),
)


@dataclass(frozen=True)
class CellSpec:
    kind: str = "normal"
    n_intermediate: int = N_INTERMEDIATE

    def __post_init__(self):
        if self.kind not in ("normal", "reduction"):
            raise ValueError(f"cell kind must be normal or reduction, got {self.kind!r}")

    @property
    def n_nodes(self) -> int:
        return 2 + self.n_intermediate + 1

    @property
    def edges(self) -> list[tuple[int, int]]:
        """(source, dest) pairs; inputs are nodes 0-1, intermediates 2.."""
        return [(src, dst) for dst in range(2, 2 + self.n_intermediate) for src in range(dst)]

    @property
    def reduction(self) -> bool:
        return self.kind == "reduction"


def extended_dims(n: int, ops_learnable: Iterable[str], ops_fixed: Iterable[str]) -> int:
    """Column count once the fixed operations not already in the catalog are appended."""
    learnable = set(ops_learnable)
    if n != len(learnable):
        raise ValueError(f"N={n} but {len(learnable)} learnable operations given")
    return n + len(set(ops_fixed) - learnable)


@dataclass
class ArchMatrix:
    values: Tensor
    m: int
    n: int
    column_ops: tuple[str, ...]
    valid_mask: np.ndarray
    learnable_mask: np.ndarray
    row_labels: tuple[str, ...] = field(default=())
    fixed_spec: tuple[FixedConnection, ...] = field(default=())

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def learnable_ops(self) -> tuple[str, ...]:
        return self.column_ops[: self.n]

    def row(self, i: int) -> Tensor:
        return self.values[i]

    def edge_weights(self) -> np.ndarray:
        """Softmax mixture weights of the learnable rows over their valid columns, as plain data."""
        block = self.values.data[: self.m, : self.n]
        z = block - block.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def row_entropy(self) -> np.ndarray:
        p = self.edge_weights()
        return -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1)

    def fixed_ops(self) -> dict[FixedConnection, str]:
        """Read each fixed row back into (connection -> selected op)."""
        out = {}
        for k, conn in enumerate(self.fixed_spec):
            r = self.values.data[self.m + k]
            out[conn] = self.column_ops[int(np.argmax(np.where(self.valid_mask[self.m + k], r, -np.inf)))]
        return out

    def copy(self) -> "ArchMatrix":
        return ArchMatrix(
            Tensor(self.values.data.copy(), requires_grad=self.values.requires_grad),
            self.m, self.n, self.column_ops, self.valid_mask.copy(), self.learnable_mask.copy(),
            self.row_labels, self.fixed_spec,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.column_ops)
        for r in self.values.data:
            w.writerow([repr(float(v)) for v in r])
        return buf.getvalue()


def build_arch_matrix(
    cell: CellSpec | None = None,
    fixed_spec: Sequence[FixedConnection] = ATTENTION_SPEC,
    rng: np.random.Generator | None = None,
    ops: Sequence[str] = CANDIDATE_OPS,
    column_ops: Sequence[str] | None = None,
    init_scale: float = 1e-3,
) -> ArchMatrix:
    cell = cell or CellSpec()
    rng = rng if rng is not None else np.random.default_rng(0)
    edges = cell.edges
    m, n = len(edges), len(ops)
    if column_ops is None:
        extra = []
        for conn in fixed_spec:
            if conn.op not in ops and conn.op not in extra:
                extra.append(conn.op)
        column_ops = tuple(ops) + tuple(extra)
    column_ops = tuple(column_ops)
    if column_ops[:n] != tuple(ops):
        raise ArchError("column_ops must start with the learnable operation catalog")
    n_prime = len(column_ops)
    if n_prime != extended_dims(n, ops, [c.op for c in fixed_spec]):
        raise ArchError(f"column_ops has {n_prime} entries, extension rule gives a different count")
    m_prime = m + len(fixed_spec)

    values = np.zeros((m_prime, n_prime))
    values[:m, :n] = init_scale * rng.standard_normal((m, n))
    valid = np.zeros((m_prime, n_prime), dtype=bool)
    valid[:m, :n] = True
    for k, conn in enumerate(fixed_spec):
        if conn.op not in column_ops:
            raise ArchError(f"fixed connection {conn.source}->{conn.dest} names op {conn.op!r} absent from columns")
        j = column_ops.index(conn.op)
        values[m + k, j] = 1.0
        valid[m + k, j] = True
    learnable = np.zeros((m_prime, n_prime), dtype=bool)
    learnable[:m, :n] = True
    labels = tuple(f"{s}->{d}" for s, d in edges) + tuple(f"{c.source}->{c.dest}" for c in fixed_spec)
    return ArchMatrix(Tensor(values, requires_grad=True), m, n, column_ops, valid, learnable, labels,
                      tuple(fixed_spec))


def arch_from_csv(text: str, template: ArchMatrix) -> ArchMatrix:
    """Load values written by :meth:`ArchMatrix.to_csv` into a copy of ``template``."""
    rows = list(csv.reader(io.StringIO(text)))
    if tuple(rows[0]) != template.column_ops:
        raise ArchError(f"CSV header {rows[0]} does not match columns {template.column_ops}")
    values = np.array([[float(v) for v in r] for r in rows[1:]])
    if values.shape != template.shape:
        raise ArchError(f"CSV matrix shape {values.shape} != {template.shape}")
    out = template.copy()
    out.values.data[...] = values
    return out


def mixed_edge_forward(x: Tensor, row: Tensor, ops: Sequence[CandidateOp], valid: np.ndarray | None = None) -> Tensor:
    """Softmax-weighted mixture of ``ops`` applied to ``x``; ``row`` holds one logit per op column."""
    n = len(ops)
    if valid is None:
        valid = np.ones(row.shape[0], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ArchError("mixed edge row has no valid columns")
    if valid[:n].sum() != n or valid[n:].any():
        raise ArchError(f"mixed edge expects exactly its {n} op columns to be valid")
    logits = row if row.shape[0] == n else row[:n]
    w = softmax(logits, axis=0)
    return weighted_sum(w, [op(x) for op in ops])


class SearchCell(Module):
    """Supernet cell: every intermediate node sums mixed edges from all earlier nodes."""

    def __init__(self, spec: CellSpec, c_pp: int, c_p: int, c: int, reduction_prev: bool,
                 rng: np.random.Generator, ops: Sequence[str] = CANDIDATE_OPS, affine: bool = False):
        self.spec = spec
        self.channels = c
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(c_pp, c, rng, affine=affine)
        else:
            self.preprocess0 = ReLUConvBN(c_pp, c, 1, 1, 0, rng, affine=affine)
        self.preprocess1 = ReLUConvBN(c_p, c, 1, 1, 0, rng, affine=affine)
        self.edge_ops = [
            [make_candidate_op(name, c, 2 if spec.reduction and src < 2 else 1, rng, affine=affine) for name in ops]
            for src, _ in spec.edges
        ]

    @property
    def out_channels(self) -> int:
        return self.spec.n_intermediate * self.channels

    def forward(self, s0, s1, arch: ArchMatrix):
        s0 = self.preprocess0(s0)
        s1 = self.preprocess1(s1)
        return cell_forward(s0, s1, arch, self.spec, self.edge_ops)


def cell_forward(s0: Tensor, s1: Tensor, arch: ArchMatrix, cell: CellSpec,
                 ops: Sequence[Sequence[CandidateOp]]) -> Tensor:
    if s0.shape != s1.shape:
        raise DimensionError(f"cell_forward: preprocessed inputs differ, {s0.shape} vs {s1.shape}")
    edges = cell.edges
    if len(ops) != len(edges):
        raise ArchError(f"{len(ops)} edge op lists for {len(edges)} edges")
    states = [s0, s1]
    e = 0
    for dst in range(2, 2 + cell.n_intermediate):
        total = None
        for src in range(dst):
            out = mixed_edge_forward(states[src], arch.values[e], ops[e], arch.valid_mask[e])
            total = out if total is None else total + out
            e += 1
        states.append(total)
    return concat_channels(states[2:])


def attach_fixed_block(cell_output: Tensor, arch: ArchMatrix, block: AttentionBlock | None) -> Tensor:
    """Apply the fixed attention chain encoded in the rows past ``arch.m``; identity when there are none."""
    if not arch.fixed_spec:
        return cell_output
    selected = arch.fixed_ops()
    by_source = {conn.source: (conn, op) for conn, op in selected.items()}
    chain = []
    node = "cell_out"
    while node in by_source:
        conn, op = by_source[node]
        chain.append(op)
        node = conn.dest
    if tuple(chain) != ATTENTION_OPS or len(chain) != len(selected):
        raise ArchError(f"fixed rows encode {chain}, expected the attention chain {ATTENTION_OPS}")
    if block is None:
        raise ArchError("architecture carries a fixed attention block but no AttentionBlock was supplied")
    return se_forward(cell_output, block)
