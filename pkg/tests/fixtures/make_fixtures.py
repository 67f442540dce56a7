"""Regenerate the committed IDX fixtures (run from the repository root)."""

from pathlib import Path

from fdarts.data import save_idx_dataset, synthetic_dataset

HERE = Path(__file__).parent

FIXTURES = {
    # single-channel frequency patterns used by the desk-scale search
    "frequency8": dict(seed=7, n=128, n_classes=4, size=8, kind="frequency"),
    # label = channel with the strongest texture
    "channel8": dict(seed=11, n=160, n_classes=4, size=8, kind="channel", channels=4),
}


def main():
    for name, kw in FIXTURES.items():
        data = synthetic_dataset(**kw)
        save_idx_dataset(data, HERE / f"{name}-images.idx", HERE / f"{name}-labels.idx")
        print(name, data.images.shape)


if __name__ == "__main__":
    main()
