"""Drive the command-line interface end to end with a small config.

Equivalent shell commands are printed as they run; every command prints a
final JSON line listing the files it wrote.
"""

import json
import tempfile
from pathlib import Path

from dirforge.cli import main

out = Path(tempfile.mkdtemp(prefix="dirforge-demo-"))
cfg = out / "small.json"
cfg.write_text(json.dumps({
    "world": {"n_train": 2000, "n_heldout": 200},
    "encoder": {"steps": 1000, "n_train": 1500},
    "denoiser": {"steps": 1000, "hidden": 128, "n_layers": 3, "components": 32},
    "transfer": {"iterations": 100, "n_pairs": 40},
    "eval": {"m_images": 16, "calibration_images": 8},
}))
common = ["--config", str(cfg), "--out", str(out)]
radius = str(out / "directions" / "radius.gtd")
steps = [
    ["world", "gen", "--name", "radius"],
    ["train", "encoder"],
    ["train", "diffusion"],
    ["direction", "learn", "--name", "radius", "--data", str(out / "world" / "radius")],
    ["sample", "--n", "4"],
    ["edit", "--direction", radius, "--n", "4"],
    ["interp", "--direction", radius, "--n", "4"],
    ["eval", "rescoring"],
]
for argv in steps:
    print("$ dirforge", " ".join(argv + common))
    code = main(argv + common)
    print("exit", code)
reports = sorted((out / "reports").iterdir())
print("$ dirforge report", reports[0])
print("exit", main(["report", str(reports[0])] + common))
