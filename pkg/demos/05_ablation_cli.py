"""The command-line workflow: generate data, train, evaluate, ablate.

Drives the installed CLI in-process with a tiny budget; the same commands
work from a shell (see the README).
"""

import tempfile
from pathlib import Path

from sala import cli

tmp = Path(tempfile.mkdtemp(prefix="sala-demo-"))
print(f"working under {tmp}\n")

# 1. generate a synthetic dataset
cli.main(["gen-synth", "--classes", "40", "--dim", "8", "--separation", "4.0",
          "--samples-per-class", "50", "--labeled-fraction", "0.4",
          "--seed", "0", "--out", str(tmp / "dataset")])

# 2. train briefly
cli.main(["train", "--data", str(tmp / "dataset"), "--out", str(tmp / "run"),
          "--episodes", "400", "--eval-every", "200", "--seed", "0"])

# 3. evaluate the best checkpoint on 100 fresh test episodes
cli.main(["eval", "--data", str(tmp / "dataset"),
          "--checkpoint", str(tmp / "run" / "checkpoint.bin"),
          "--episodes", "100", "--out", str(tmp / "eval"), "--seed", "0"])

# 4. the 2x2 module grid (tiny budget: directional numbers only)
cli.main(["ablate", "--data", str(tmp / "dataset"), "--out", str(tmp / "ablation"),
          "--episodes", "400", "--eval-every", "200", "--seed", "0"])

print("\nablation table:")
print((tmp / "ablation" / "ablation.csv").read_text())
