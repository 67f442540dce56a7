"""Search, final training and evaluation runs driven by a :class:`RunConfig`."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import GradientTape, NumericFault
from .bilevel import BilevelState, append_metrics_csv, evaluate, search_epoch
from .config import RunConfig, auto_cutout_length
from .data import Dataset, iterate_batches, load_idx, make_augmenter, split, synthetic_dataset
from .genotype import Genotype, derive_genotype, serialize_genotype
from .network import (
    EvalNetwork,
    NetworkConfig,
    SearchNetwork,
    auxiliary_loss,
    expected_param_count,
    load_checkpoint,
    network_summary,
    save_checkpoint,
)
from .nn import cross_entropy
from .optim import cosine_lr, sgd_momentum_step
from .search_space import ATTENTION_SPEC, CellSpec, build_arch_matrix

log = logging.getLogger(__name__)

SEARCH_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "val_acc", "mean_row_entropy")
TRAIN_FIELDS = ("epoch", "lr", "train_loss", "train_aux_loss", "train_acc", "val_loss", "val_acc")


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.source == "idx":
        data = load_idx(d.images, d.labels, n_classes=d.n_classes, name=Path(d.images).stem)
    else:
        data = synthetic_dataset(d.seed, d.n, d.n_classes, d.size, kind=d.kind, channels=d.channels, noise=d.noise)
    if d.limit is not None and d.limit < len(data):
        data = data.subset(np.arange(d.limit))
    return data


def network_config(cfg: RunConfig, mode: str, data: Dataset) -> NetworkConfig:
    n = cfg.network
    common = dict(
        init_channels=n.init_channels, n_classes=data.n_classes, stem=n.stem,
        input_shape=tuple(data.images.shape[1:]), attention=n.attention,
        dual_kernels=tuple(n.dual_kernels), se_reduction=n.se_reduction, aux_hidden=n.aux_hidden,
    )
    if mode == "search":
        return NetworkConfig(n_cells=n.search_cells, mode="search", **common)
    t = cfg.train
    return NetworkConfig(n_cells=n.eval_cells, mode="eval", auxiliary=t.auxiliary, aux_weight=t.aux_weight,
                         path_dropout_p=t.path_dropout_p, **common)


def _stream_seeds(seed: int) -> tuple[int, int]:
    ss = np.random.SeedSequence(seed).generate_state(2)
    return int(ss[0]), int(ss[1])


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _snapshot(out: Path, tag: str, archs) -> None:
    for kind, arch in zip(("normal", "reduce"), archs):
        _write(out / "alpha" / f"{tag}_{kind}.csv", arch.to_csv())


@dataclass
class SearchResult:
    genotype: Genotype
    history: list[dict] = field(default_factory=list)
    model: SearchNetwork | None = None


def build_search(cfg: RunConfig, data: Dataset) -> SearchNetwork:
    rng = np.random.default_rng(cfg.seed)
    fixed = ATTENTION_SPEC if cfg.network.attention else ()
    arch_n = build_arch_matrix(CellSpec("normal"), fixed, rng)
    arch_r = build_arch_matrix(CellSpec("reduction"), fixed, rng)
    return SearchNetwork(network_config(cfg, "search", data), arch_n, arch_r, rng)


def run_search(cfg: RunConfig, out: str | Path | None = None) -> SearchResult:
    """Alternate architecture and weight updates, snapshotting both matrices every epoch.

    On a numeric fault the current matrices are flushed as ``alpha/last_*.csv``
    before the exception propagates.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", cfg.to_json())
    s = cfg.search
    data = load_dataset(cfg)
    train, val = split(data, s.val_fraction, cfg.seed)
    model = build_search(cfg, data)
    state = BilevelState(
        model, xi=s.xi, gamma=s.gamma, order=s.order, lr_max=s.lr_max, lr_min=s.lr_min, momentum=s.momentum,
        weight_decay=s.weight_decay, arch_beta1=s.arch_beta1, arch_beta2=s.arch_beta2,
        arch_weight_decay=s.arch_weight_decay, total_epochs=s.epochs, grad_clip=s.grad_clip,
    )
    t_seed, v_seed = _stream_seeds(cfg.seed)
    metrics_path = out / "metrics.csv"
    metrics_path.unlink(missing_ok=True)
    _snapshot(out, "epoch_000", model.archs())
    history = []
    try:
        for epoch in range(s.epochs):
            m = search_epoch(
                state,
                iterate_batches(train, s.batch_size, t_seed, epoch),
                iterate_batches(val, s.batch_size, v_seed, epoch),
            )
            if not math.isfinite(m["train_loss"]) or not math.isfinite(m["val_loss"]):
                raise NumericFault(f"non-finite loss in search epoch {epoch + 1}")
            history.append(m)
            append_metrics_csv(metrics_path, m, SEARCH_FIELDS)
            _snapshot(out, f"epoch_{epoch + 1:03d}", model.archs())
            log.info("search epoch %d: val_loss %.4f val_acc %.3f entropy %.4f",
                     m["epoch"], m["val_loss"], m["val_acc"], m["mean_row_entropy"])
    except NumericFault:
        _snapshot(out, "last", model.archs())
        raise
    genotype = derive_genotype(*model.archs())
    _write(out / "search.genotype", serialize_genotype(genotype))
    summary = {"epochs": s.epochs, "order": s.order, "attention": cfg.network.attention,
               "final": {k: history[-1][k] for k in SEARCH_FIELDS} if history else {},
               "diagnostics": state.diagnostics, "genotype": serialize_genotype(genotype)}
    _write(out / "summary.json", json.dumps(summary, indent=2))
    return SearchResult(genotype, history, model)


@dataclass
class TrainResult:
    best_val_acc: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    model: EvalNetwork | None = None


def _clip(grads, max_norm):
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    return grads if norm <= max_norm else [g * (max_norm / (norm + 1e-6)) for g in grads]


def train_splits(cfg: RunConfig, data: Dataset):
    return split(data, cfg.train.val_fraction, cfg.seed)


def run_train(cfg: RunConfig, genotype: Genotype, out: str | Path | None = None) -> TrainResult:
    """Train the discrete network; keeps the checkpoint with the best validation accuracy."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", cfg.to_json())
    _write(out / "train.genotype", serialize_genotype(genotype))
    t = cfg.train
    data = load_dataset(cfg)
    train, val = train_splits(cfg, data)
    rng = np.random.default_rng(cfg.seed)
    model = EvalNetwork(network_config(cfg, "eval", data), genotype.validate(), rng)
    length = auto_cutout_length(data.images.shape[-1]) if t.cutout_length is None else t.cutout_length
    augment = make_augmenter(length, t.random_erasing_p)
    t_seed, _ = _stream_seeds(cfg.seed)
    metrics_path = out / "metrics.csv"
    metrics_path.unlink(missing_ok=True)
    opt_state = None
    best_acc, best_epoch, history = -1.0, 0, []
    weights = model.weights()
    for epoch in range(t.epochs):
        lr = cosine_lr(epoch, t.epochs, t.lr_max, t.lr_min)
        model.train()
        losses, aux_losses, correct, seen = [], [], 0, 0
        for x, y in iterate_batches(train, t.batch_size, t_seed, epoch, augment=augment):
            with GradientTape() as tape:
                logits, aux = model(x, return_aux=True)
                loss = auxiliary_loss(logits, aux, y, model.config.aux_weight)
            grads = _clip(tape.gradient(loss, weights), t.grad_clip)
            opt_state = sgd_momentum_step(weights, grads, opt_state, lr, t.momentum, t.weight_decay)
            losses.append(loss.item())
            aux_losses.append(_aux_value(aux, y))
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
        if not math.isfinite(np.mean(losses)):
            raise NumericFault(f"non-finite training loss in epoch {epoch + 1}")
        val_loss, val_acc = evaluate(model, iterate_batches(val, cfg.eval.batch_size, 0, 0, shuffle=False))
        m = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)),
             "train_aux_loss": float(np.mean(aux_losses)), "train_acc": correct / seen,
             "val_loss": val_loss, "val_acc": val_acc}
        history.append(m)
        append_metrics_csv(metrics_path, m, TRAIN_FIELDS)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch + 1
            save_checkpoint(model, out / "best")
        log.info("train epoch %d: loss %.4f val_acc %.3f", epoch + 1, m["train_loss"], val_acc)
    summary = {"best_val_acc": best_acc, "best_epoch": best_epoch, "epochs": t.epochs,
               "params": expected_param_count(model.config, genotype), "final": history[-1]}
    _write(out / "summary.json", json.dumps(summary, indent=2))
    return TrainResult(best_acc, best_epoch, history, model)


def _aux_value(aux, y) -> float:
    if aux is None:
        return 0.0
    return cross_entropy(aux, y).item()


def run_eval(cfg: RunConfig, genotype: Genotype, checkpoint: str | Path) -> dict:
    """Accuracy of a trained checkpoint on the held-out part of the training split."""
    data = load_dataset(cfg)
    _, val = train_splits(cfg, data)
    model = EvalNetwork(network_config(cfg, "eval", data), genotype.validate(), np.random.default_rng(cfg.seed))
    load_checkpoint(model, checkpoint)
    loss, acc = evaluate(model, iterate_batches(val, cfg.eval.batch_size, 0, 0, shuffle=False))
    return {"val_loss": loss, "val_acc": acc, "n": len(val)}


def export_summary(cfg: RunConfig, genotype: Genotype, input_shape=None, n_classes=None) -> dict:
    """Parameter and shape summary of the evaluation network for ``genotype``."""
    d = cfg.data
    shape = input_shape or ((d.channels or (d.n_classes if d.kind == "channel" else 1)), d.size, d.size)
    fake = Dataset(np.zeros((1,) + tuple(shape)), np.zeros(1, dtype=int), n_classes or d.n_classes)
    ncfg = network_config(cfg, "eval", fake)
    model = EvalNetwork(ncfg, genotype.validate(), np.random.default_rng(cfg.seed))
    summary = network_summary(model)
    summary["expected_params"] = expected_param_count(ncfg, genotype)
    summary["genotype"] = serialize_genotype(genotype)
    return summary
