"""Synthetic overfit: generate 64 leaf images, train the small detector on them, score it on the same images.

Run from the repository root:  python demos/04_overfit_synthetic.py [epochs]
The full 200-epoch run takes a few minutes on one core. Pass a smaller epoch count for a quick look.
"""

import json
import sys
import tempfile
import time
from pathlib import Path

from tomformer.data import SynthConfig, load_annotations, load_samples, synth_dataset
from tomformer.evaluation import detections_from_output, mean_ap
from tomformer.matching import LossWeights
from tomformer.model import ModelConfig, count_parameters, forward
from tomformer.trainer import TrainConfig, fit, read_log

run = json.loads((Path(__file__).parent.parent / "configs" / "overfit.json").read_text())
model_cfg = ModelConfig.from_dict(run["model"])
train_cfg = TrainConfig.from_dict(run["train"])
# unmatched queries are pushed toward "no object" as hard as matched ones are toward their class
weights = LossWeights(**run["loss"])
if len(sys.argv) > 1:
    train_cfg = TrainConfig.from_dict({**run["train"], "epochs": int(sys.argv[1])})
work = Path(tempfile.mkdtemp(prefix="tomformer-"))

_, manifest_path = synth_dataset(SynthConfig.from_dict(run["synth"]), work / "data")
manifest = load_annotations(manifest_path)
print(f"{len(manifest)} images, {len(manifest.annotations)} boxes, classes: {', '.join(manifest.classes)}")
print(f"model: {count_parameters(model_cfg):,} parameters, {model_cfg.num_queries} queries")

samples = load_samples(manifest, model_cfg.image_height, model_cfg.image_width)
start = time.time()
params, checkpoint = fit(model_cfg, train_cfg, samples, work / "run", weights=weights)
log = read_log(work / "run" / "train_log.jsonl")
print(f"trained {len(log)} epochs in {time.time() - start:.0f} s")
for rec in log[:: max(1, len(log) // 8)] + log[-1:]:
    print(f"  epoch {rec['epoch']:>3}  lr {rec['lr']:.2e}  loss {rec['total']:.4f}"
          f"  (class {rec['class_term']:.3f}, l1 {rec['l1_term']:.3f}, giou {rec['giou_term']:.3f})")

# every query becomes a detection ranked by its best non-background score
detections = []
for s in samples:
    detections += detections_from_output(forward(s.image, params, model_cfg), s.image_id)
report = mean_ap(detections, manifest.annotations, iou_threshold=0.5)
print()
print(report.to_text())
print(f"\ncheckpoint left at {checkpoint}")
