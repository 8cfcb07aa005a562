"""Train a narrow model for a few epochs and score it on held-out phantoms.

A couple of minutes on one core:  python demos/03_short_training.py [out_dir]
"""
import sys

from cganet.config import RunConfig
from cganet.training import evaluate, load_cases, split, train

cfg = RunConfig(n_cases=12, folds=4, epochs=12, switch_epoch=4)
out = sys.argv[1] if len(sys.argv) > 1 else None

cases = load_cases(cfg)
train_cases, val_cases = split(cases, cfg.val_fold)
print(f"{len(train_cases)} training and {len(val_cases)} held-out phantoms")


def show(r):
    line = f"epoch {r['epoch']}  L_M {r['L_M']:.3f}  L_A {r['L_A']:.4f}  L_I {r['L_I']:+.3f}"
    line += "  (inter on)" if r["inter_active"] else ""
    print(line + f"  val Dice {r['val_dice_fg_mean']:.3f}")


result = train(cfg, train_cases, val_cases, out_dir=out, on_epoch=show)

scores = evaluate(result.model, val_cases)
agg = scores["aggregate"]
print("region Dice  ET %.3f  WT %.3f  TC %.3f" % (agg["dice_ET"], agg["dice_WT"], agg["dice_TC"]))
print("confidence bins", [round(b, 3) for b in scores["confidence_bins"]])
