"""
Self-supervised pretraining
===========================

The model masks spans of encoder frames and learns to recognise (contrastive)
or regress (reconstruction) the true frame from its context. The frozen
context output is then a feature extractor for the downstream tasks.
"""

import time

import numpy as np
import torch

from eeg2vec.eegio import SynthSpec, synth_dataset, window_segments
from eeg2vec.pretrain import Eeg2vecConfig, FrozenExtractor, pretrain, sample_mask

torch.set_num_threads(1)

ds = synth_dataset(SynthSpec(n_subjects=8, seed=0))
train = [
    w
    for rec, e in zip(ds.recordings, ds.manifest.entries)
    if e.split == "train"
    for w in window_segments(rec, 3.0, 1.0)
]
windows = np.stack([w.eeg for w in train])
print("pretraining windows:", windows.shape)

# half of the 192 frames are covered by 10-frame spans
plan = sample_mask(192, 0.5, 10, np.random.default_rng(0))
print("masked frames:", int(plan.masked.sum()), "from", len(plan.starts), "spans")

for objective in ("contrastive", "reconstruction"):
    cfg = Eeg2vecConfig.desk(objective=objective)
    t0 = time.perf_counter()
    res = pretrain(windows, cfg)
    first, last = res.losses[0], np.mean(res.losses[-10:])
    print(f"{objective:>14}: loss {first:.3f} -> {last:.3f} in {time.perf_counter() - t0:.0f}s")

# a uniform-candidate contrastive loss sits at log(1 + negatives)
print("log 51 =", round(np.log(51), 4))

ext = FrozenExtractor(res.checkpoint)
feats = ext(windows[:2])
print("frozen features:", tuple(feats.shape), "requires_grad:", feats.requires_grad)
