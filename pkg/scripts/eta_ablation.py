"""Policy Split with different bonus strengths: eta on the high-entropy loss and
eta_prime on the normal loss (positive or negative).

    python scripts/eta_ablation.py --seeds 0 1
"""

import argparse

import numpy as np

from policy_split.core_math import HIGH_ENTROPY, NORMAL
from policy_split.experiments import Protocol, make_corpus, pretrain, run

SETTINGS = [
    {"eta": 0.0},
    {"eta": 0.03},
    {"eta": 0.3},
    {"eta": 0.03, "eta_prime": 0.01},
    {"eta": 0.03, "eta_prime": -0.01},
]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--task", default="MultiPathSum")
    ap.add_argument("--difficulty", type=int, default=2)
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args(argv)

    protocol = Protocol(task_kind=args.task, difficulty=args.difficulty, steps=args.steps)
    pre = {s: pretrain(protocol, make_corpus(protocol, s), s) for s in args.seeds}
    print(f"{'setting':<28}{'acc N':>8}{'acc HE':>8}{'ent N':>9}{'ent HE':>9}{'kl':>10}")
    for setting in SETTINGS:
        res = [run("PolicySplit", s, protocol, pretrained=pre[s], **setting) for s in args.seeds]
        acc_n = np.mean([r.final_eval[NORMAL].accuracy for r in res])
        acc_h = np.mean([r.final_eval[HIGH_ENTROPY].accuracy for r in res])
        ent_n = np.mean([r.final_eval[NORMAL].entropy_bits for r in res])
        ent_h = np.mean([r.final_eval[HIGH_ENTROPY].entropy_bits for r in res])
        kl = np.mean([r.kl_final for r in res])
        label = ", ".join(f"{k}={v}" for k, v in setting.items())
        print(f"{label:<28}{acc_n:>8.3f}{acc_h:>8.3f}{ent_n:>9.4f}{ent_h:>9.4f}{kl:>10.2e}")


if __name__ == "__main__":
    main()
