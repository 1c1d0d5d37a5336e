"""Compare the original optimiser settings (lr 0.001, batch 256) with the
desk-scale ones (lr 0.01, batch 32) at the same 30-epoch budget, single fold."""

import argparse
from dataclasses import replace
from pathlib import Path

from thermnet.dataset import SynthConfig, generate_synthetic, load_corpus
from thermnet.experiments import DESK_TRAIN
from thermnet.model import build_study2_spec, init_parameters
from thermnet.training import TrainConfig, evaluate, make_folds, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/regime"))
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()

    corpus = args.out / "corpus"
    if not (corpus / "manifest.tsv").exists():
        generate_synthetic(SynthConfig(), corpus)
    data = load_corpus(corpus)
    plan = make_folds(data.labels, 5, 0)
    tr, te = data.subset(plan.train_indices(0)), data.subset(plan.test_indices(0))
    spec = build_study2_spec(len(data.vocabulary))
    regimes = {
        "original": TrainConfig(learning_rate=0.001, batch_size=256, epochs=args.epochs),
        "desk": replace(DESK_TRAIN, epochs=args.epochs),
    }
    for name, cfg in regimes.items():
        model, losses = train(init_parameters(spec, 0, data.vocabulary), tr, cfg)
        acc = evaluate(model, te).mean_class_accuracy
        print(f"{name:<9} lr {cfg.learning_rate:g} batch {cfg.batch_size}: "
              f"loss {losses[0]:.3f} -> {losses[-1]:.3f}, held-out mean class accuracy {acc:.3f}")


if __name__ == "__main__":
    main()
