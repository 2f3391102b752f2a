"""Self-supervised EEG representations and auditory decoding tasks.

Submodules:

- ``eegio``: recordings, the ``.eegr`` container, manifests, synthetic data, windowing
- ``dsp``: rational resampling, re-referencing, gammatone speech envelopes
- ``layers`` / ``gradcheck`` / ``checkpoint``: neural building blocks and their tooling
- ``pretrain``: the masked contrastive / reconstruction model and its training loop
- ``downstream``: match-mismatch and envelope-regression models
- ``scoring``: per-subject metrics and the weighted challenge score
"""

from .checkpoint import ModelCheckpoint
from .downstream import DownstreamConfig, train_mm, train_reg
from .eegio import DatasetManifest, Recording, SynthSpec, read_recording, synth_dataset, write_recording
from .pretrain import Eeg2vec, Eeg2vecConfig, FrozenExtractor, pretrain
from .scoring import report, weighted_score

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "DownstreamConfig",
    "Eeg2vec",
    "Eeg2vecConfig",
    "FrozenExtractor",
    "ModelCheckpoint",
    "Recording",
    "SynthSpec",
    "pretrain",
    "read_recording",
    "report",
    "synth_dataset",
    "train_mm",
    "train_reg",
    "weighted_score",
    "write_recording",
]
