"""5-fold cross-validation of the study2 network on the default synthetic corpus.

    python scripts/desk_xval.py --out runs/desk
"""

import argparse
import time
from pathlib import Path

from thermnet.dataset import SynthConfig, generate_synthetic, load_corpus
from thermnet.experiments import DESK_TRAIN, desk_xval
from thermnet.thermal import thermal_dynamics


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    corpus = args.out / "corpus"
    if not (corpus / "manifest.tsv").exists():
        generate_synthetic(SynthConfig(seed=args.seed), corpus)
    data = load_corpus(corpus)
    for ci, name in enumerate(data.vocabulary):
        st = thermal_dynamics([s for s, y in zip(data.samples, data.labels) if y == ci])
        print(f"{name:<12} dynamics mean {st.mean:.3f} degC, sd {st.sd:.3f}")

    start = time.perf_counter()
    report = desk_xval(data, args.k, DESK_TRAIN, args.seed, args.jobs)
    (args.out / "xval_report.json").write_text(report.to_json(), encoding="utf-8")
    (args.out / "confusion.csv").write_text(report.confusion_csv(), encoding="utf-8")
    print(report.confusion_csv(), end="")
    print(f"mean class accuracy {report.mean_class_accuracy:.4f}; "
          f"fold accuracy {report.fold_mean:.4f} (SD {report.fold_sd:.4f}); "
          f"{time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
