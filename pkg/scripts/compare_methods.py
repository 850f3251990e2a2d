"""Train several methods from shared pretrained checkpoints and tabulate the
final per-mode metrics.

    python scripts/compare_methods.py --task MultiPathSum --difficulty 2 --seeds 0 1 2
"""

import argparse
import csv
import sys

import numpy as np

from policy_split.core_math import HIGH_ENTROPY, NORMAL
from policy_split.experiments import Protocol, make_corpus, pretrain, run
from policy_split.trainer import METHODS

COLUMNS = ("method", "seed", "mode", "accuracy", "entropy_bits", "length", "best_of_n", "div_ngram", "div_bleu",
           "kl_final", "discoveries", "seconds")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--task", default="MultiPathSum")
    ap.add_argument("--difficulty", type=int, default=2)
    ap.add_argument("--methods", nargs="+", default=["GRPO", "PolicySplit"], choices=METHODS)
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--csv", help="write per-run rows here")
    args = ap.parse_args(argv)

    protocol = Protocol(task_kind=args.task, difficulty=args.difficulty, steps=args.steps, lr=args.lr)
    rows = []
    for seed in args.seeds:
        p0 = pretrain(protocol, make_corpus(protocol, seed), seed)
        for method in args.methods:
            r = run(method, seed, protocol, pretrained=p0)
            for mode in (NORMAL, HIGH_ENTROPY):
                e = r.final_eval[mode]
                rows.append(dict(method=method, seed=seed, mode=mode, accuracy=e.accuracy,
                                 entropy_bits=e.entropy_bits, length=e.length, best_of_n=e.best_of_n,
                                 div_ngram=e.div_ngram, div_bleu=e.div_bleu, kl_final=r.kl_final,
                                 discoveries=len(r.discoveries.get(mode, ())), seconds=r.seconds))
            print(f"seed {seed} {method:<24} done in {r.seconds:.0f}s", file=sys.stderr)

    print(f"{'method':<24}{'mode':<8}{'acc':>8}{'ent(bits)':>11}{'best@8':>8}{'div-bleu':>10}{'kl':>10}")
    for method in args.methods:
        for mode in (NORMAL, HIGH_ENTROPY):
            sel = [r for r in rows if r["method"] == method and r["mode"] == mode]
            mean = {k: np.mean([r[k] for r in sel]) for k in ("accuracy", "entropy_bits", "best_of_n", "div_bleu", "kl_final")}
            print(f"{method:<24}{mode:<8}{mean['accuracy']:>8.3f}{mean['entropy_bits']:>11.4f}"
                  f"{mean['best_of_n']:>8.3f}{mean['div_bleu']:>10.3f}{mean['kl_final']:>10.2e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, COLUMNS)
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
