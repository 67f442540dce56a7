"""Discrete cell descriptions: derivation from architecture matrices, text format, DOT rendering.

Text format, one line per (cell kind, node, slot)::

    normal n2 s0 <- 1 sep_conv_3x3
    normal concat 2 3 4 5

Nodes 0 and 1 are the cell inputs (outputs of the cells two back and one
back), intermediates are numbered 2-5. ``#`` starts a comment.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .ops import CANDIDATE_OPS

KINDS = ("normal", "reduce")
GENOTYPE_OPS = tuple(op for op in CANDIDATE_OPS if op != "zero")
N_INTERMEDIATE = 4
DEFAULT_CONCAT = tuple(range(2, 2 + N_INTERMEDIATE))


class GenotypeParseError(ValueError):
    def __init__(self, line: int, column: int, message: str):
        self.line, self.column = line, column
        super().__init__(f"line {line}, column {column}: {message}")


class GenotypeValidationError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line, self.column = line, column
        where = f"line {line}, column {column}: " if line is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class Genotype:
    normal: tuple[tuple[str, int], ...]
    reduce: tuple[tuple[str, int], ...]
    normal_concat: tuple[int, ...] = DEFAULT_CONCAT
    reduce_concat: tuple[int, ...] = DEFAULT_CONCAT

    def __post_init__(self):
        for name in ("normal", "reduce"):
            object.__setattr__(self, name, tuple((str(op), int(src)) for op, src in getattr(self, name)))
        for name in ("normal_concat", "reduce_concat"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    def cell(self, kind: str):
        return self.normal if kind == "normal" else self.reduce

    def concat(self, kind: str):
        return self.normal_concat if kind == "normal" else self.reduce_concat

    def validate(self) -> "Genotype":
        for kind in KINDS:
            pairs = self.cell(kind)
            if len(pairs) != 2 * N_INTERMEDIATE:
                raise GenotypeValidationError(f"{kind}: expected {2 * N_INTERMEDIATE} entries, got {len(pairs)}")
            for k in range(N_INTERMEDIATE):
                node = k + 2
                (op_a, src_a), (op_b, src_b) = pairs[2 * k], pairs[2 * k + 1]
                for op, src in ((op_a, src_a), (op_b, src_b)):
                    _check_entry(kind, node, op, src)
                if src_a == src_b:
                    raise GenotypeValidationError(f"{kind} n{node}: both inputs come from node {src_a}")
            _check_concat(kind, self.concat(kind))
        return self


def _check_entry(kind, node, op, src, line=None, column=None):
    if op not in GENOTYPE_OPS:
        raise GenotypeValidationError(f"{kind} n{node}: unknown or disallowed operation {op!r}", line, column)
    if src == node:
        raise GenotypeValidationError(f"{kind} n{node}: self-edge", line, column)
    if src > node:
        raise GenotypeValidationError(f"{kind} n{node}: forward reference to node {src}", line, column)
    if src < 0:
        raise GenotypeValidationError(f"{kind} n{node}: negative source {src}", line, column)


def _check_concat(kind, concat, line=None, column=None):
    if not concat:
        raise GenotypeValidationError(f"{kind}: empty concat list", line, column)
    if len(set(concat)) != len(concat):
        raise GenotypeValidationError(f"{kind}: duplicate concat node", line, column)
    for v in concat:
        if v not in DEFAULT_CONCAT:
            raise GenotypeValidationError(f"{kind}: concat node {v} is not an intermediate node", line, column)


# ---------------------------------------------------------------------------
# derivation


def _derive_cell(arch):
    weights = arch.edge_weights()
    ops = list(arch.learnable_ops)
    allowed = [j for j, op in enumerate(ops) if op != "zero"]
    pairs = []
    e = 0
    for dst in range(2, 2 + N_INTERMEDIATE):
        scored = []
        for src in range(dst):
            w = weights[e, allowed]
            j = int(np.argmax(w))  # first maximum = catalog order
            scored.append((-w[j], e, src, ops[allowed[j]]))
            e += 1
        scored.sort(key=lambda t: (t[0], t[1]))
        pairs.extend((op, src) for _, _, src, op in scored[:2])
    return tuple(pairs)


def derive_genotype(arch_normal, arch_reduce) -> Genotype:
    """Keep the two strongest incoming edges per node, each with its strongest non-zero op."""
    return Genotype(_derive_cell(arch_normal), _derive_cell(arch_reduce))


# ---------------------------------------------------------------------------
# text format

_LINE = re.compile(r"^(?P<kind>\S+)\s+n(?P<node>\d+)\s+s(?P<slot>\d+)\s+<-\s+(?P<src>-?\d+)\s+(?P<op>\S+)\s*$")


def serialize_genotype(g: Genotype) -> str:
    lines = []
    for kind in KINDS:
        pairs = g.cell(kind)
        for k in range(len(pairs) // 2):
            for slot in (0, 1):
                op, src = pairs[2 * k + slot]
                lines.append(f"{kind} n{k + 2} s{slot} <- {src} {op}")
        lines.append(f"{kind} concat " + " ".join(str(v) for v in g.concat(kind)))
    return "\n".join(lines) + "\n"


def _tokens(line: str):
    return [(m.group(), m.start() + 1) for m in re.finditer(r"\S+", line)]


def parse_genotype(text: str) -> Genotype:
    entries = {kind: {} for kind in KINDS}
    concats: dict[str, tuple[int, ...]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        toks = _tokens(line)
        kind, kcol = toks[0]
        if kind not in KINDS:
            raise GenotypeParseError(lineno, kcol, f"expected 'normal' or 'reduce', got {kind!r}")
        if len(toks) >= 2 and toks[1][0] == "concat":
            if kind in concats:
                raise GenotypeParseError(lineno, toks[1][1], f"duplicate concat line for {kind}")
            vals = []
            for tok, col in toks[2:]:
                if not re.fullmatch(r"\d+", tok):
                    raise GenotypeParseError(lineno, col, f"expected a node index, got {tok!r}")
                vals.append(int(tok))
            _check_concat(kind, vals, lineno, toks[1][1])
            concats[kind] = tuple(vals)
            continue
        m = _LINE.match(line.strip())
        if m is None:
            col = _first_bad_column(toks)
            raise GenotypeParseError(lineno, col, "expected '<kind> n<node> s<slot> <- <source> <op>'")
        off = len(line) - len(line.lstrip())
        node, slot, src, op = int(m["node"]), int(m["slot"]), int(m["src"]), m["op"]
        if not 2 <= node < 2 + N_INTERMEDIATE:
            raise GenotypeValidationError(f"{kind}: node n{node} out of range 2-{1 + N_INTERMEDIATE}", lineno,
                                          off + m.start("node"))
        if slot not in (0, 1):
            raise GenotypeValidationError(f"{kind} n{node}: slot s{slot} must be s0 or s1", lineno,
                                          off + m.start("slot"))
        if (node, slot) in entries[kind]:
            raise GenotypeValidationError(f"{kind} n{node} s{slot}: duplicate entry", lineno, 1 + off)
        _check_entry(kind, node, op, src, lineno, off + m.start("src") + 1)
        entries[kind][(node, slot)] = (op, src, lineno)
    pairs = {}
    for kind in KINDS:
        seq = []
        for node in range(2, 2 + N_INTERMEDIATE):
            for slot in (0, 1):
                if (node, slot) not in entries[kind]:
                    raise GenotypeValidationError(f"{kind} n{node} s{slot}: missing entry", len(text.splitlines()) + 1, 1)
            (op_a, src_a, _), (op_b, src_b, ln) = entries[kind][(node, 0)], entries[kind][(node, 1)]
            if src_a == src_b:
                raise GenotypeValidationError(f"{kind} n{node}: both inputs come from node {src_a}", ln, 1)
            seq += [(op_a, src_a), (op_b, src_b)]
        pairs[kind] = tuple(seq)
    return Genotype(pairs["normal"], pairs["reduce"],
                    concats.get("normal", DEFAULT_CONCAT), concats.get("reduce", DEFAULT_CONCAT)).validate()


def _first_bad_column(toks):
    patterns = [r"\S+", r"n\d+", r"s\d+", r"<-", r"-?\d+", r"\S+"]
    for (tok, col), pat in zip(toks, patterns):
        if not re.fullmatch(pat, tok):
            return col
    if len(toks) < len(patterns):
        return toks[-1][1] + len(toks[-1][0])
    return toks[len(patterns)][1]


def random_genotype(rng: np.random.Generator) -> Genotype:
    cells = []
    for _ in KINDS:
        seq = []
        for node in range(2, 2 + N_INTERMEDIATE):
            srcs = rng.choice(node, size=2, replace=False)
            seq += [(GENOTYPE_OPS[rng.integers(len(GENOTYPE_OPS))], int(s)) for s in srcs]
        cells.append(tuple(seq))
    concats = []
    for _ in KINDS:
        k = int(rng.integers(1, N_INTERMEDIATE + 1))
        concats.append(tuple(sorted(int(v) for v in rng.choice(DEFAULT_CONCAT, size=k, replace=False))))
    return Genotype(cells[0], cells[1], concats[0], concats[1])


# ---------------------------------------------------------------------------
# DOT rendering


def _node_name(src: int) -> str:
    return {0: "P2", 1: "P1"}.get(src, str(src - 2))


def cell_to_dot(g: Genotype, kind: str) -> str:
    pairs = g.cell(kind)
    lines = [f"digraph {kind} {{", "  rankdir=LR;", '  node [shape=box, style=filled];',
             '  P2 [label="Cell_P2"];', '  P1 [label="Cell_P1"];']
    for k in range(len(pairs) // 2):
        lines.append(f'  "{k}" [label="{k}"];')
    lines.append('  Out [label="Cell_Out"];')
    for k in range(len(pairs) // 2):
        for slot in (0, 1):
            op, src = pairs[2 * k + slot]
            lines.append(f'  {_quote(_node_name(src))} -> "{k}" [label="{op}"];')
    for v in g.concat(kind):
        lines.append(f'  "{v - 2}" -> Out;')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _quote(name: str) -> str:
    return f'"{name}"' if name.isdigit() else name


def genotype_to_dot(g: Genotype) -> dict[str, str]:
    """One DOT digraph per cell kind, keyed by kind."""
    return {kind: cell_to_dot(g, kind) for kind in KINDS}
