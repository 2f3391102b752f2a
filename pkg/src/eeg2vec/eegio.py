"""Recordings, the on-disk container, synthetic data and windowing.

Container layout (little-endian throughout)::

    b"EEGR"  magic
    uint32   header byte length
    bytes    UTF-8 JSON header
    float32  EEG payload, channel-major (C * N values)
    float32  envelope payload (N values, only if present)

Recording arrays are held as float32 so that a write/read round trip is
bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import signal

MAGIC = b"EEGR"
FORMAT_VERSION = 1
SPLITS = ("train", "dev", "test1_heldout_story", "test2_heldout_subject")


class ContainerError(ValueError):
    """Malformed, truncated or otherwise unreadable container file."""


class TruncatedFileError(ContainerError):
    pass


def _frozen_f32(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype="<f4", copy=True)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite samples")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Recording:
    """A multichannel EEG recording with an optional paired stimulus envelope."""

    subject_id: str
    trial_id: str
    eeg: np.ndarray
    sample_rate_hz: float
    envelope: np.ndarray | None = None

    def __post_init__(self):
        eeg = _frozen_f32(self.eeg, "eeg")
        if eeg.ndim != 2 or eeg.shape[0] < 1:
            raise ValueError(f"eeg must be [channels, samples] with >= 1 channel, got {eeg.shape}")
        object.__setattr__(self, "eeg", eeg)
        if self.envelope is not None:
            env = _frozen_f32(self.envelope, "envelope")
            if env.shape != (eeg.shape[1],):
                raise ValueError(f"envelope length {env.shape} does not match {eeg.shape[1]} samples")
            object.__setattr__(self, "envelope", env)
        fs = float(self.sample_rate_hz)
        if not (fs > 0 and math.isfinite(fs)):
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "sample_rate_hz", fs)

    @property
    def n_channels(self) -> int:
        return self.eeg.shape[0]

    @property
    def n_samples(self) -> int:
        return self.eeg.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        same_env = (self.envelope is None and other.envelope is None) or (
            self.envelope is not None
            and other.envelope is not None
            and np.array_equal(self.envelope, other.envelope)
        )
        return (
            self.subject_id == other.subject_id
            and self.trial_id == other.trial_id
            and self.sample_rate_hz == other.sample_rate_hz
            and self.eeg.shape == other.eeg.shape
            and np.array_equal(self.eeg, other.eeg)
            and same_env
        )

    __hash__ = None


@dataclass(frozen=True)
class SegmentTriple:
    """Match-mismatch training unit; ``label == 1`` iff ``stim_a`` is the match."""

    eeg: np.ndarray
    stim_a: np.ndarray
    stim_b: np.ndarray
    label: int
    subject_id: str

    def __post_init__(self):
        t = self.eeg.shape[-1]
        if self.stim_a.shape[-1] != t or self.stim_b.shape[-1] != t:
            raise ValueError("eeg and both stimuli must have equal length")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class RegressionSegment:
    eeg: np.ndarray
    envelope: np.ndarray
    subject_id: str

    def __post_init__(self):
        if self.eeg.shape[-1] != self.envelope.shape[-1]:
            raise ValueError("eeg and envelope lengths differ")
        if not np.all(np.isfinite(self.envelope)):
            raise ValueError("envelope contains non-finite values")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject_id: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"unknown split tag {e.split!r} for {e.path}")
        held_out = {e.subject_id for e in self.entries if e.split == "test2_heldout_subject"}
        leaked = held_out & {e.subject_id for e in self.entries if e.split == "train"}
        if leaked:
            raise ValueError(f"held-out subjects also appear in train: {sorted(leaked)}")

    def select(self, *splits: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split in splits]

    def split_of_subject(self) -> dict[str, str]:
        """Map each subject to ``"set2"`` if it is a held-out subject, else ``"set1"``."""
        out: dict[str, str] = {}
        for e in self.entries:
            if e.split == "test2_heldout_subject":
                out[e.subject_id] = "set2"
            else:
                out.setdefault(e.subject_id, "set1")
        return out

    def to_json(self) -> str:
        rows = [{"path": e.path, "subject_id": e.subject_id, "split": e.split} for e in self.entries]
        return json.dumps(rows, indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        rows = json.loads(Path(path).read_text())
        base = Path(path).parent
        entries = []
        for r in rows:
            p = Path(r["path"])
            if not p.is_absolute():
                p = base / p
            entries.append(ManifestEntry(str(p), r["subject_id"], r["split"]))
        return cls(entries)


# ---------------------------------------------------------------------------
# container I/O


def write_recording(rec: Recording, path) -> None:
    eeg = np.ascontiguousarray(rec.eeg, dtype="<f4")
    if not np.all(np.isfinite(eeg)) or (
        rec.envelope is not None and not np.all(np.isfinite(rec.envelope))
    ):
        raise ValueError("refusing to write non-finite samples")
    header = {
        "version": FORMAT_VERSION,
        "channels": int(eeg.shape[0]),
        "samples": int(eeg.shape[1]),
        "sample_rate_hz": rec.sample_rate_hz,
        "subject_id": rec.subject_id,
        "trial_id": rec.trial_id,
        "has_envelope": rec.envelope is not None,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(eeg.tobytes(order="C"))
        if rec.envelope is not None:
            fh.write(np.ascontiguousarray(rec.envelope, dtype="<f4").tobytes())


def read_header(buf: bytes) -> tuple[dict, int]:
    """Parse the container header; returns (header, payload offset)."""
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ContainerError("not a recording container (bad magic)")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise TruncatedFileError(f"header truncated: expected {8 + hlen} bytes, got {len(buf)}")
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise ContainerError(
            f"unsupported container version {header.get('version')!r} (expected {FORMAT_VERSION})"
        )
    for key in ("channels", "samples", "sample_rate_hz", "subject_id", "trial_id", "has_envelope"):
        if key not in header:
            raise ContainerError(f"malformed header: missing {key!r}")
    if int(header["channels"]) < 1:
        raise ValueError(f"header declares {header['channels']} channels; need at least 1")
    if int(header["samples"]) < 0:
        raise ContainerError("negative sample count in header")
    return header, 8 + hlen


def read_recording(path) -> Recording:
    buf = Path(path).read_bytes()
    header, offset = read_header(buf)
    c, n = int(header["channels"]), int(header["samples"])
    n_values = c * n + (n if header["has_envelope"] else 0)
    expected = offset + 4 * n_values
    if len(buf) < expected:
        raise TruncatedFileError(
            f"payload truncated: expected {expected} bytes, file has {len(buf)}"
        )
    if len(buf) > expected:
        raise ContainerError(f"trailing data: expected {expected} bytes, file has {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=n_values, offset=offset)
    eeg = data[: c * n].reshape(c, n)
    env = data[c * n :] if header["has_envelope"] else None
    return Recording(
        subject_id=header["subject_id"],
        trial_id=header["trial_id"],
        eeg=eeg,
        sample_rate_hz=header["sample_rate_hz"],
        envelope=env,
    )


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 8
    trials_per_subject: int = 3
    duration_s: float = 60.0
    fs_hz: float = 64.0
    channels: int = 16
    snr: float = 1.0
    seed: int = 0
    mixed_fraction: float = 0.5
    n_heldout_subjects: int | None = None
    noise: str = "white"

    def __post_init__(self):
        for name in ("n_subjects", "trials_per_subject", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.duration_s <= 0 or self.fs_hz <= 0:
            raise ValueError("duration_s and fs_hz must be positive")
        if not self.snr > 0:
            raise ValueError("snr must be positive (use math.inf for a noiseless mix)")
        if self.noise not in ("white", "pink"):
            raise ValueError(f"noise must be 'white' or 'pink', got {self.noise!r}")
        if self.fs_hz <= 16.0:
            raise ValueError("fs_hz must exceed 16 Hz to carry 0.5-8 Hz envelope content")


@dataclass
class SynthDataset:
    manifest: DatasetManifest
    recordings: list[Recording]
    mixing: dict[str, np.ndarray]
    """Per-subject [channels] weights of the envelope in each EEG channel."""

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for entry, rec in zip(self.manifest.entries, self.recordings):
            write_recording(rec, out / entry.path)
            rows.append(ManifestEntry(entry.path, entry.subject_id, entry.split))
        DatasetManifest(rows).save(out / "manifest.json")
        mix = {s: [float(v) for v in w] for s, w in sorted(self.mixing.items())}
        (out / "mixing.json").write_text(json.dumps(mix, indent=1) + "\n")
        return out / "manifest.json"


def band_limited_noise(rng: np.random.Generator, n: int, fs: float, band=(0.5, 8.0)) -> np.ndarray:
    """Unit-variance Gaussian noise band-passed to ``band`` Hz."""
    sos = signal.butter(4, band, btype="bandpass", fs=fs, output="sos")
    pad = int(4 * fs)
    x = signal.sosfiltfilt(sos, rng.standard_normal(n + 2 * pad))[pad:-pad]
    return x / x.std()


def pink_noise(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Unit-variance noise with a 1/f power spectrum along the last axis."""
    n = shape[-1]
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.arange(spec.shape[-1], dtype=float)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n=n, axis=-1)
    x -= x.mean(axis=-1, keepdims=True)
    return x / x.std(axis=-1, keepdims=True)


def _split_plan(spec: SynthSpec) -> tuple[list[str], dict[str, list[str]]]:
    subjects = [f"sub-{i + 1:02d}" for i in range(spec.n_subjects)]
    n_out = spec.n_heldout_subjects
    if n_out is None:
        n_out = 0 if spec.n_subjects < 3 else max(1, round(spec.n_subjects / 6))
    if n_out >= spec.n_subjects:
        raise ValueError("at least one subject must remain held-in")
    held_out = set(subjects[spec.n_subjects - n_out :])
    k = spec.trials_per_subject
    plan = {}
    for s in subjects:
        if s in held_out:
            plan[s] = ["test2_heldout_subject"] * k
        elif k >= 3:
            plan[s] = ["train"] * (k - 2) + ["dev", "test1_heldout_story"]
        elif k == 2:
            plan[s] = ["train", "dev"]
        else:
            plan[s] = ["train"]
    return subjects, plan


def synth_dataset(spec: SynthSpec) -> SynthDataset:
    """Generate recordings with a planted envelope.

    Each subject gets a random subset of ``mixed_fraction * channels``
    channels (at least one) carrying ``w_c * envelope + noise`` where the
    noise standard deviation is ``|w_c| / sqrt(snr)``; the remaining
    channels are unit-variance noise. Every trial has its own envelope.
    """
    root = np.random.SeedSequence(spec.seed)
    subjects, plan = _split_plan(spec)
    n = int(round(spec.duration_s * spec.fs_hz))
    n_mixed = max(1, int(round(spec.mixed_fraction * spec.channels)))
    noise_scale = 0.0 if math.isinf(spec.snr) else 1.0 / math.sqrt(spec.snr)

    entries, recordings, mixing = [], [], {}
    for s, child in zip(subjects, root.spawn(len(subjects))):
        rng = np.random.default_rng(child)
        chans = rng.choice(spec.channels, size=n_mixed, replace=False)
        w = np.zeros(spec.channels)
        w[chans] = rng.uniform(0.5, 1.5, n_mixed)
        mixing[s] = w
        for t, split in enumerate(plan[s]):
            env = band_limited_noise(rng, n, spec.fs_hz)
            if spec.noise == "pink":
                noise = pink_noise(rng, (spec.channels, n))
            else:
                noise = rng.standard_normal((spec.channels, n))
            std = np.where(w != 0, np.abs(w) * noise_scale, 1.0)
            eeg = w[:, None] * env[None, :] + std[:, None] * noise
            trial = f"trial-{t + 1:02d}"
            rec = Recording(s, trial, eeg, spec.fs_hz, env)
            recordings.append(rec)
            entries.append(ManifestEntry(f"{s}_{trial}.eegr", s, split))
    return SynthDataset(DatasetManifest(entries), recordings, mixing)


# ---------------------------------------------------------------------------
# windowing


class Window(NamedTuple):
    eeg: np.ndarray
    envelope: np.ndarray | None
    start: int
    subject_id: str = ""
    trial_id: str = ""


def _whole_samples(seconds: float, fs: float, what: str) -> int:
    n = seconds * fs
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-9 * max(1.0, n):
        raise ValueError(f"{what} of {seconds} s is not a positive whole number of samples at {fs} Hz")
    return k


def window_segments(rec: Recording, win_s: float, hop_s: float) -> list[Window]:
    fs = rec.sample_rate_hz
    win = _whole_samples(win_s, fs, "window")
    hop = _whole_samples(hop_s, fs, "hop")
    n = rec.n_samples
    if win > n:
        raise ValueError(f"window of {win} samples is longer than the recording ({n} samples)")
    count = (n - win) // hop + 1
    out = []
    for i in range(count):
        s = i * hop
        env = None if rec.envelope is None else rec.envelope[s : s + win]
        out.append(Window(rec.eeg[:, s : s + win], env, s, rec.subject_id, rec.trial_id))
    return out


def _overlaps(a: Window, b: Window) -> bool:
    same_source = a.subject_id == b.subject_id and a.trial_id == b.trial_id
    return same_source and abs(a.start - b.start) < a.eeg.shape[-1]


def eligible_imposters(windows: Sequence[Window], match_index: int) -> list[int]:
    """Indices of windows that do not overlap the match window."""
    m = windows[match_index]
    return [i for i, w in enumerate(windows) if i != match_index and not _overlaps(w, m)]


def sample_imposter(
    windows: Sequence[Window],
    match_index: int,
    rng: np.random.Generator,
    pool: Sequence[Window] = (),
    same_trial: bool = True,
) -> SegmentTriple:
    """Build a match-mismatch triple around ``windows[match_index]``.

    The imposter is drawn uniformly from non-overlapping windows of
    ``windows``; ``pool`` (windows from other trials) is used only when
    none is eligible, or always when ``same_trial`` is false.
    """
    if len(windows) + len(pool) < 2:
        raise ValueError("need at least two windows to sample an imposter")
    match = windows[match_index]
    if match.envelope is None:
        raise ValueError("match window carries no envelope")
    candidates = [windows[i] for i in eligible_imposters(windows, match_index)]
    if not same_trial or not candidates:
        candidates = candidates + [w for w in pool if w.envelope is not None and not _overlaps(w, match)]
    if not candidates:
        raise ValueError(f"no eligible imposter for window {match_index}")
    imp = candidates[int(rng.integers(len(candidates)))]
    if rng.random() < 0.5:
        return SegmentTriple(match.eeg, match.envelope, imp.envelope, 1, match.subject_id)
    return SegmentTriple(match.eeg, imp.envelope, match.envelope, 0, match.subject_id)
