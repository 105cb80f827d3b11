"""
The ``cached-det`` command line
===============================

Every subcommand is reachable from Python through :func:`cached_det.cli.main`,
which returns the process exit code (0 ok, 1 internal error, 2 bad input).
This script drives convert, synth and eval the way a shell session would.
"""

import dataclasses
import json
import tempfile
from pathlib import Path

from cached_det.cli import main
from cached_det.evalkit import predictions_to_json
from cached_det.taxonomy import from_dataset_json

work = Path(tempfile.mkdtemp(prefix="cached_cli_"))

# A PMC-style source file: coarse roles, boxes as [x, y, w, h].
source = {"file_name": "fig1.png", "width": 320, "height": 240, "annotations": [
    {"id": 1, "role": "plot area", "bbox": [50, 20, 200, 160]},
    {"id": 2, "role": "tick mark", "bbox": [99, 180, 2, 5]},
    {"id": 3, "role": "tick mark", "bbox": [149, 180, 2, 5]},
    {"id": 4, "role": "tick label", "bbox": [92, 187, 16, 10]},
    {"id": 5, "role": "tick mark", "bbox": [45, 59, 5, 2]},
    {"id": 6, "role": "tick mark", "bbox": [45, 119, 5, 2]},
    {"id": 7, "role": "axis title", "bbox": [5, 60, 10, 80]},
]}
(work / "src").mkdir()
(work / "src" / "fig1.json").write_text(json.dumps(source))

print("$ cached-det convert --in src --out refined.json")
code = main(["convert", "--in", str(work / "src"), "--out", str(work / "refined.json")])
print("exit", code)

# Without an annotated plot area the axis split has no anchor: exit code 2
# and a message naming the file.  Estimating it from the tick marks works.
source["annotations"] = source["annotations"][1:]
(work / "src" / "fig1.json").write_text(json.dumps(source))
print("exit", main(["convert", "--in", str(work / "src"), "--out", str(work / "x.json")]))
print("exit", main(["convert", "--in", str(work / "src"), "--plot-area-source", "detect",
                    "--out", str(work / "x.json")]))

# %%
print("$ cached-det synth --n 3 --seed 7 --out corpus")
main(["synth", "--n", "3", "--seed", "7", "--out", str(work / "corpus")])

# Scoring the ground truth against itself gives AP 1.
charts = from_dataset_json((work / "corpus" / "annotations.json").read_bytes())
perfect = {c.id: [dataclasses.replace(b, score=1.0) for b in c.boxes] for c in charts}
(work / "perfect.json").write_bytes(predictions_to_json(perfect))
print("$ cached-det eval --dataset corpus/annotations.json --predictions perfect.json")
main(["eval", "--dataset", str(work / "corpus" / "annotations.json"),
      "--predictions", str(work / "perfect.json")])

# Training and inference follow the same pattern, for example:
#   cached-det train --dataset corpus/annotations.json --out-dir run --epochs 12
#   cached-det infer --checkpoint run/checkpoint.ckpt --images corpus/images \
#       --dataset corpus/annotations.json --out predictions.json --render overlays
