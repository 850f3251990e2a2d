"""Accuracy and entropy of the entropy-regularisation baseline across loss
coefficients, relative to GRPO from the same checkpoint. Reports both the
evaluation sampler (T=0.6, top-k/top-p) and plain T=1 sampling.

    python scripts/entropy_reg_sweep.py --coefs 0.003 0.03 0.3 1.0
"""

import argparse

import numpy as np

from policy_split import analysis
from policy_split.core_math import NORMAL
from policy_split.experiments import Protocol, make_corpus, pretrain, run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--task", default="ModularChain")
    ap.add_argument("--difficulty", type=int, default=3)
    ap.add_argument("--coefs", nargs="+", type=float, default=[0.003, 0.03, 0.3, 1.0])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args(argv)

    protocol = Protocol(task_kind=args.task, difficulty=args.difficulty, steps=args.steps)
    print(f"{'method':<14}{'coef':>8}{'acc':>8}{'acc T=1':>9}{'ent(bits)':>11}")
    for label, method, coefs in [("GRPO", "GRPO", [0.0]), ("EntropyReg", "EntropyRegularization", args.coefs)]:
        for coef in coefs:
            acc, acc1, ent = [], [], []
            for s in args.seeds:
                queries = make_corpus(protocol, s)
                r = run(method, s, protocol, pretrained=pretrain(protocol, queries, s), ent_reg_coef=coef)
                acc.append(r.final_eval[NORMAL].accuracy)
                ent.append(r.final_eval[NORMAL].entropy_bits)
                acc1.append(analysis.evaluate_mode(r.params, queries, NORMAL, protocol.eval_runs, temperature=1.0,
                                                   seed=s, top_k=None, top_p=None).accuracy)
            print(f"{label:<14}{coef:>8.3g}{np.mean(acc):>8.3f}{np.mean(acc1):>9.3f}{np.mean(ent):>11.4f}")


if __name__ == "__main__":
    main()
