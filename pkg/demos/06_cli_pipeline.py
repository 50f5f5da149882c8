"""
The command line pipeline
=========================

generate -> train -> run -> evaluate -> report, driven from Python through
the same entry point as the ``nebpcl`` console script. Every command writes a
manifest next to its outputs.
"""

import json
import pathlib
import tempfile

from nebpcl.cli import main

work = pathlib.Path(tempfile.mkdtemp(prefix="nebpcl-demo-"))
print("working in", work)

assert main(["generate", "--config", "train-small", "--out", str(work / "data"), "--count", "2", "--seed", "1"]) == 0
train_cfg = {"dataset": str(work / "data"), "checkpoint": str(work / "model" / "nebp.json"),
             "K": 100, "epochs": 1, "lr": 1e-4, "seed": 0}
(work / "train.json").write_text(json.dumps(train_cfg))
assert main(["train", "--config", str(work / "train.json")]) == 0

for algo in ("bp", "nebp"):
    argv = ["run", "--dataset", str(work / "data"), "--algorithm", algo, "--K", "100", "--out", str(work / algo)]
    if algo == "nebp":
        argv += ["--checkpoint", str(work / "model" / "nebp.json")]
    assert main(argv) == 0

assert main(["report", "--records", f"bp={work / 'bp'}", f"nebp={work / 'nebp'}", "--out", str(work / "report")]) == 0
print((work / "report" / "outage.csv").read_text().splitlines()[:6])
print(json.loads((work / "report" / "manifest.json").read_text())["config_digest"])

# Configuration problems exit with code 2 and leave nothing behind.
print("exit code for a bad preset:", main(["generate", "--config", "nope", "--out", str(work / "bad")]))
