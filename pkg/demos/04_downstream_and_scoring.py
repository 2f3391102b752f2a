"""
Match-mismatch, envelope regression and the challenge score
===========================================================

Both task models sit on top of a frozen pretrained extractor. Predictions on
the held-out story and held-out subject splits are scored per subject and
combined with weights 2/3 and 1/3.
"""

import numpy as np
import torch

from eeg2vec.downstream import DownstreamConfig, evaluate_mm, evaluate_reg, make_triples, train_mm, train_reg
from eeg2vec.eegio import SynthSpec, synth_dataset, window_segments
from eeg2vec.pretrain import Eeg2vecConfig, FrozenExtractor, pretrain
from eeg2vec.scoring import PredictionRecord, report

torch.set_num_threads(1)
ds = synth_dataset(SynthSpec(n_subjects=8, seed=0))


def split(name, win, hop):
    return [
        w
        for rec, e in zip(ds.recordings, ds.manifest.entries)
        if e.split == name
        for w in window_segments(rec, win, hop)
    ]


train, dev = split("train", 3.0, 1.0), split("dev", 3.0, 3.0)
test = split("test1_heldout_story", 3.0, 3.0) + split("test2_heldout_subject", 3.0, 3.0)

ext = FrozenExtractor(pretrain(np.stack([w.eeg for w in train]), Eeg2vecConfig.desk()).model)
cfg = DownstreamConfig.desk(epochs=8)

mm = train_mm(train, dev, ext, cfg, on_epoch=lambda r: print("mm  epoch", r["epoch"], "dev acc", round(r["dev_accuracy"], 3)))
reg = train_reg(train, dev, ext, cfg, on_epoch=lambda r: print("reg epoch", r["epoch"], "dev pcc", round(r["dev_pcc"], 3)))

triples = make_triples(test, np.random.default_rng(1))
_, logits = evaluate_mm(mm.model, ext, triples)
mm_records = [PredictionRecord(t.subject_id, "mm", t.label, int(z > 0)) for t, z in zip(triples, logits)]
print(report(mm_records, ds.manifest).to_text())

_, scores, _ = evaluate_reg(reg.model, ext, test)
reg_records = [PredictionRecord(w.subject_id, "reg", None, s) for w, s in zip(test, scores)]
print(report(reg_records, ds.manifest).to_text())
