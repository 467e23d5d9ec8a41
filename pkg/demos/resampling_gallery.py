"""Write one synthetic sample resized with every method and both policies.

    python demos/resampling_gallery.py out_dir

Produces one PGM per (method, policy) pair plus the composed B-H-N channels,
which makes the differences between nearest, bilinear and Hamming visible at
the 352x144 and 224x224 input sizes.
"""

import sys
from pathlib import Path

from greyinput import synth
from greyinput.compose import compose
from greyinput.pgm import write_pgm
from greyinput.resample import PRESETS, InterpMethod, apply_policy

out = Path(sys.argv[1] if len(sys.argv) > 1 else "gallery")
out.mkdir(parents=True, exist_ok=True)

sample = synth.generate_dataset(1, seed=4).samples[0]
write_pgm(out / "original.pgm", sample.image)
print("labels:", ", ".join(sample.labels))

for label in ("352x144", "224x224"):
    policy = PRESETS[label]
    for method in InterpMethod:
        img = apply_policy(sample.image, policy, method)
        write_pgm(out / f"{label}_{policy.mode}_{method.value}.pgm", img)
    stack = compose(sample.image, "B-H-N", policy)
    for name, channel in zip("BHN", stack):
        write_pgm(out / f"{label}_channel_{name}.pgm", channel)

print(f"wrote {len(list(out.glob('*.pgm')))} images to {out}")
