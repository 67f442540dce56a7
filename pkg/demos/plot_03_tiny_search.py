"""
A small search and retrain
==========================

Runs a few epochs of first-order search on the committed 8 x 8 fixture, then
trains the derived cell briefly. Takes about a minute on one core.
"""

from pathlib import Path
import tempfile

from fdarts.config import load_config
from fdarts.genotype import serialize_genotype
from fdarts.pipeline import run_search, run_train

fixtures = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
cfg = load_config(None, {
    "data.source": "idx",
    "data.images": str(fixtures / "frequency8-images.idx"),
    "data.labels": str(fixtures / "frequency8-labels.idx"),
    "search.order": "first",
    "search.epochs": 4,
    "train.epochs": 5,
})

with tempfile.TemporaryDirectory() as out:
    found = run_search(cfg, Path(out) / "search")
    for m in found.history:
        print(f"epoch {m['epoch']}: val loss {m['val_loss']:.4f}  mean row entropy {m['mean_row_entropy']:.6f}")
    print(serialize_genotype(found.genotype))

    ###########################################################################
    # Retrain the discrete network with path dropout and the auxiliary head.
    trained = run_train(cfg, found.genotype, Path(out) / "train")
    for m in trained.history:
        print(f"epoch {m['epoch']}: train loss {m['train_loss']:.3f} (aux {m['train_aux_loss']:.3f})"
              f"  val acc {m['val_acc']:.3f}")
