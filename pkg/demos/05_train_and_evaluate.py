"""
Training a detector and scoring it
==================================

A short end-to-end run: synthesize a corpus, train the cascade with context
fusion for a few epochs, detect on the training images, score with the COCO
and chart-competition metrics, and render overlays.  The defaults finish in a
few minutes on one CPU core; raise ``--epochs`` for a usable model.
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from cached_det.cli import render_overlay
from cached_det.context import ContextConfig
from cached_det.detector import DetectorConfig, cascade_infer_batch, load_checkpoint
from cached_det.evalkit import evaluate, predictions_to_json
from cached_det.synthcharts import generate_corpus
from cached_det.trainer import TrainConfig, load_samples, train

parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
parser.add_argument("--charts", type=int, default=8)
parser.add_argument("--epochs", type=int, default=3)
parser.add_argument("--out", default=None)
args = parser.parse_args()
out = Path(args.out or tempfile.mkdtemp(prefix="cached_demo_"))

dataset = generate_corpus(args.charts, base_seed=0, out_dir=out / "corpus")
samples = load_samples(dataset)

# A desk-sized configuration: fewer sampled RoIs and proposals than the
# full-scale defaults, the padded PCE block replaced by exact masking.
detector = DetectorConfig(rois_per_image=128, roi_pos_fraction=0.5, max_proposals=300, rpn_pos_iou=0.5,
                          context=ContextConfig(pad_to_block=False))
cfg = TrainConfig(dataset=str(dataset), out_dir=str(out / "run"), epochs=args.epochs,
                  batch_size=1, lr=0.04, lr_steps=(max(args.epochs - 1, 1),), warmup_steps=10,
                  detector=detector)
result = train(cfg, samples)
print(f"{result.steps} steps in {result.seconds:.0f}s, loss {result.losses[0]:.2f} -> "
      f"{np.mean(result.losses[-5:]):.2f}")

# %%
# The checkpoint is self-describing: the config travels in its header.
model = load_checkpoint(result.checkpoint)
dets = cascade_infer_batch([s.image for s in samples], model)
predictions = {s.chart.id: d for s, d in zip(samples, dets)}
(out / "predictions.json").write_bytes(predictions_to_json(predictions))

report = evaluate(predictions, [s.chart for s in samples])
print(report.table())

for s, d in zip(samples[:2], dets):
    render_overlay(s.image, [x for x in d if x.score >= 0.3],
                   out / "overlays" / f"{Path(s.chart.file_name).stem}_overlay.png")
print("outputs in", out)
