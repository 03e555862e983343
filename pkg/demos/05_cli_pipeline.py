"""The whole pipeline through the command-line interface.

Drives datagen -> train -> eval -> gradcheck -> bench programmatically
(each step is the same as running ``divemb <subcommand> ...`` in a
shell) and shows that rerunning train produces byte-identical output.
"""

import json
import pathlib
import subprocess
import sys
import tempfile

CONFIG = {
    "data": {"images": 48, "concepts": 12, "m_max": 3, "noise_sigma": 0.4,
             "style_sigma": 0.15},
    "predictor": {"k": 3, "t": 2},
    "train": {"epochs": 6, "batch_images": 16, "val_fraction": 0.25,
              "eval_every": 2},
}


def run(*args):
    cmd = [sys.executable, "-m", "divemb", *args]
    print(f"$ divemb {' '.join(args)}")
    proc = subprocess.run(cmd, capture_output=True, text=True, check=True)
    print(proc.stdout)
    return proc.stdout


with tempfile.TemporaryDirectory() as tmp:
    tmp = pathlib.Path(tmp)
    cfg = tmp / "run.json"
    cfg.write_text(json.dumps(CONFIG, indent=2))

    run("datagen", "--config", str(cfg), "--out", str(tmp / "corpus.divc"))
    run("train", "--config", str(cfg), "--out", str(tmp / "model.divp"),
        "--metrics", str(tmp / "metrics.csv"))
    print("metrics csv (first lines):")
    print("\n".join((tmp / "metrics.csv").read_text().splitlines()[:4]))
    print()
    run("eval", "--checkpoint", str(tmp / "model.divp"))
    run("gradcheck", "--seed", "0")
    run("bench", "--k", "4", "--d", "1024", "--no-timing")

    first = (tmp / "model.divp").read_bytes()
    run("train", "--config", str(cfg), "--out", str(tmp / "model2.divp"))
    second = (tmp / "model2.divp").read_bytes()
    print(f"checkpoints from two identical train runs byte-equal: "
          f"{first == second}")
