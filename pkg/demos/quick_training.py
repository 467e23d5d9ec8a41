"""A few minutes of training on a small synthetic set, then evaluation.

    python demos/quick_training.py [out_dir]

Uses the library API rather than the CLI; the equivalent commands are

    greyinput gen --n 400 --seed 0 --out data
    greyinput train --data data --epochs-frozen 1 --epochs-finetune 4 \
        --lr-frozen 3e-3 --lr-min 3e-3 --lr-max 1e-2 --out runs/quick
    greyinput eval runs/quick/checkpoint.npz --out runs/quick/eval
"""

import sys
from pathlib import Path

from greyinput.descriptors import CODES
from greyinput.experiment import ExperimentConfig, eval_run, train_run

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/quick")

cfg = ExperimentConfig(gen_n=400, gen_seed=0, epochs_frozen=1, epochs_finetune=4, lr_frozen=3e-3,
                       lr_min=3e-3, lr_max=1e-2, out=str(out))
result = train_run(cfg, progress=lambda r: print(f"epoch {r.epoch} (phase {r.phase}): loss {r.mean_loss:.4f}, "
                                                  f"val macro PRAUC {r.macro_prauc:.4f}"))

print(f"\nfinal macro PRAUC {result.macro_prauc:.4f}")
for code, value in zip(CODES, result.per_class):
    print(f"  {code:<7} {value:.3f}")

metrics = eval_run(out / "checkpoint.npz", out / "eval", top_k=5)
print(f"\nre-evaluated: {metrics['macro_prauc']:.4f}; highest-loss images in {out / 'eval' / 'highest_loss.csv'}")
