"""Command-line entry point: ``eeg2vec <verb> ...``.

Every verb is deterministic for a given ``--seed``: rerunning a command on the
same inputs writes byte-identical files. Config files are JSON objects whose
keys are fields of the relevant config class; a ``"preset"`` key picks the
starting point (``"desk"`` by default, or ``"full"``) and a ``"pretrain"`` /
``"downstream"`` / ``"gammatone"`` sub-object is used when present so one file can serve both
stages. Invalid input exits with status 2 and a one-line message on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, ModelCheckpoint
from .downstream import (
    DegenerateInputError,
    DownstreamConfig,
    RawFeatures,
    evaluate_mm,
    evaluate_reg,
    load_task_model,
    make_triples,
    train_mm,
    train_reg,
)
from .dsp import GammatoneBank, ResamplerSpec, artifact_removal_hook, gammatone_envelope, preprocess_eeg, resample
from .eegio import (
    ContainerError,
    DatasetManifest,
    Recording,
    SynthSpec,
    read_recording,
    synth_dataset,
    window_segments,
    write_recording,
)
from .pretrain import Eeg2vecConfig, FrozenExtractor, TrainingDivergedError, load_eeg2vec, pretrain
from .scoring import PredictionRecord, read_predictions, report, write_predictions

EXIT_INVALID = 2


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_config(path: str | None, section: str) -> tuple[str, dict]:
    if not path:
        return "desk", {}
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise CliError(f"{path}: config must be a JSON object")
    preset = raw.get("preset", "desk")
    sections = ("preset", "pretrain", "downstream", "gammatone")
    body = raw.get(section, {k: v for k, v in raw.items() if k not in sections})
    if preset not in ("desk", "full"):
        raise CliError(f"{path}: unknown preset {preset!r}")
    return preset, dict(body)


def _build(cls, preset: str, body: dict, **forced):
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(body) - known)
    if unknown:
        raise CliError(f"unknown {cls.__name__} fields: {', '.join(unknown)}")
    body = {**body, **forced}
    if "alpha_range" in body:
        body["alpha_range"] = tuple(body["alpha_range"])
    return getattr(cls, preset)(**body)


def _windows(manifest: DatasetManifest, splits, win_s: float, hop_s: float):
    out = []
    for e in manifest.select(*splits):
        rec = read_recording(e.path)
        if rec.envelope is None:
            raise CliError(f"{e.path}: recording has no stimulus envelope")
        out.extend(window_segments(rec, win_s, hop_s))
    if not out:
        raise CliError(f"no windows in split(s) {', '.join(splits)}")
    return out


def _extractor(path: str, n_channels: int):
    if path == "none":
        return RawFeatures(n_channels)
    ext = FrozenExtractor(load_eeg2vec(path))
    if ext.n_channels != n_channels:
        raise CliError(f"extractor expects {ext.n_channels} channels, data has {n_channels}")
    return ext


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# verbs


def cmd_synth_data(args) -> None:
    spec = SynthSpec(
        n_subjects=args.subjects,
        trials_per_subject=args.trials,
        duration_s=args.duration,
        fs_hz=args.fs,
        channels=args.channels,
        snr=args.snr,
        seed=args.seed,
        noise=args.noise,
    )
    path = synth_dataset(spec).save(args.out)
    print(path)


def cmd_preprocess(args) -> None:
    rec = read_recording(args.input)

    def chain(x):
        return preprocess_eeg(x, rec.sample_rate_hz, args.target_hz, args.intermediate_hz, artifact_removal_hook)

    eeg = chain(rec.eeg)
    env = None
    if rec.envelope is not None:
        # same two resampling stages as the EEG, without re-referencing
        env = rec.envelope.astype(np.float64)
        if rec.sample_rate_hz != args.intermediate_hz:
            env = resample(env, ResamplerSpec(rec.sample_rate_hz, args.intermediate_hz))
        env = resample(env, ResamplerSpec(args.intermediate_hz, args.target_hz))
    write_recording(Recording(rec.subject_id, rec.trial_id, eeg, args.target_hz, env), args.out)


def cmd_envelope(args) -> None:
    from scipy.io import wavfile

    fs, audio = wavfile.read(args.audio)
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim == 2:
        audio = audio.mean(axis=1)
    _, body = _load_config(args.config, "gammatone")
    unknown = sorted(set(body) - set(GammatoneBank.__dataclass_fields__))
    if unknown:
        raise CliError(f"unknown GammatoneBank fields: {', '.join(unknown)}")
    env = gammatone_envelope(audio, float(fs), GammatoneBank(**body), out_hz=args.out_hz)
    with open(args.out, "wb") as fh:
        np.save(fh, env)


def cmd_pretrain(args) -> None:
    preset, body = _load_config(args.config, "pretrain")
    manifest = DatasetManifest.load(args.data)
    probe = _build(Eeg2vecConfig, preset, body, seed=args.seed)
    train = _windows(manifest, ["train"], probe.window_s, probe.hop_s)
    n_channels = train[0].eeg.shape[0]
    if "n_channels" not in body:
        probe = _build(Eeg2vecConfig, preset, body, seed=args.seed, n_channels=n_channels)
    cfg = probe
    if args.updates is not None:
        cfg = Eeg2vecConfig.from_dict({**cfg.to_dict(), "updates": args.updates})
    res = pretrain(np.stack([w.eeg for w in train]), cfg, checkpoint_path=args.out)
    loss_csv = Path(args.losses or f"{args.out}.loss.csv")
    _write_rows(loss_csv, ["step", "loss"], [(i, _fmt(v)) for i, v in enumerate(res.losses, 1)])
    print(f"pretrained {cfg.updates} updates, final loss {res.losses[-1]:.4f}" if res.losses else "no updates run")


def _train(args, task: str) -> None:
    preset, body = _load_config(args.config, "downstream")
    cfg = _build(DownstreamConfig, preset, body, seed=args.seed)
    if args.epochs is not None:
        cfg = DownstreamConfig.from_dict({**cfg.to_dict(), "epochs": args.epochs})
    manifest = DatasetManifest.load(args.data)
    train = _windows(manifest, ["train"], cfg.window_s, cfg.hop_s)
    dev = _windows(manifest, ["dev"], cfg.window_s, cfg.window_s)
    ext = _extractor(args.extractor, train[0].eeg.shape[0])
    fn = train_mm if task == "mm" else train_reg
    res = fn(train, dev, ext, cfg)
    # stored relative to the checkpoint so a model directory can be moved as a unit
    rel = args.extractor if args.extractor == "none" else os.path.relpath(args.extractor, Path(args.out).parent)
    res.checkpoint.provenance["extractor"] = rel
    res.checkpoint.save(args.out)
    metric = "dev_accuracy" if task == "mm" else "dev_pcc"
    rows = [(h["epoch"], _fmt(h["train_loss"]), _fmt(h[metric])) for h in res.history]
    _write_rows(Path(args.metrics or f"{args.out}.metrics.csv"), ["epoch", "train_loss", metric], rows)
    best = res.history[res.best_epoch - 1][metric]
    print(f"best epoch {res.best_epoch}: {metric} {best:.4f}")


def cmd_train_mm(args) -> None:
    _train(args, "mm")


def cmd_train_reg(args) -> None:
    _train(args, "reg")


def cmd_eval(args) -> None:
    ckpt = ModelCheckpoint.load(args.model)
    model = load_task_model(ckpt)
    cfg = model.cfg
    manifest = DatasetManifest.load(args.data)
    splits = args.splits.split(",")
    windows = _windows(manifest, splits, cfg.window_s, cfg.window_s)
    extractor = args.extractor
    if extractor is None:
        extractor = ckpt.provenance.get("extractor", "none")
        if extractor != "none":
            extractor = str(Path(args.model).parent / extractor)
    ext = _extractor(extractor, windows[0].eeg.shape[0])
    if ckpt.kind == "match_mismatch":
        triples = make_triples(windows, np.random.default_rng([args.seed, 2]))
        _, logits = evaluate_mm(model, ext, triples)
        records = [PredictionRecord(t.subject_id, "mm", t.label, int(z > 0)) for t, z in zip(triples, logits)]
    else:
        _, scores, _ = evaluate_reg(model, ext, windows)
        records = [PredictionRecord(w.subject_id, "reg", None, s) for w, s in zip(windows, scores)]
    write_predictions(records, args.out)
    print(f"{len(records)} predictions -> {args.out}")


def cmd_score(args) -> None:
    rep = report(read_predictions(args.predictions), DatasetManifest.load(args.data))
    if args.out:
        Path(args.out).write_text(rep.to_csv())
    sys.stdout.write(rep.to_text())


# ---------------------------------------------------------------------------
# parser


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0), help="RNG seed (default 0)")
    parser.add_argument("--config", default=d(None), help="JSON config file")
    parser.add_argument("--threads", type=int, default=d(1), help="torch intra-op threads (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eeg2vec", description="EEG representation learning toolkit")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic planted-envelope dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--duration", type=float, default=60.0, help="seconds per trial")
    p.add_argument("--fs", type=float, default=64.0)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--snr", type=float, default=1.0)
    p.add_argument("--noise", choices=["white", "pink"], default="white")
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("preprocess", parents=[common], help="resample, re-reference and resample a recording")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-hz", type=float, default=64.0)
    p.add_argument("--intermediate-hz", type=float, default=1024.0)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("envelope", parents=[common], help="gammatone envelope of a WAV file (.npy out)")
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--out-hz", type=float, default=64.0)
    p.set_defaults(fn=cmd_envelope)

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised pretraining on the train split")
    p.add_argument("--data", required=True, help="manifest.json")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--losses", help="loss CSV (default <out>.loss.csv)")
    p.add_argument("--updates", type=int, help="override the number of updates")
    p.set_defaults(fn=cmd_pretrain)

    for verb, fn, what in (("train-mm", cmd_train_mm, "match-mismatch"), ("train-reg", cmd_train_reg, "envelope regression")):
        p = sub.add_parser(verb, parents=[common], help=f"train the {what} model")
        p.add_argument("--extractor", required=True, help="pretrained checkpoint, or 'none' for raw EEG")
        p.add_argument("--data", required=True, help="manifest.json")
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--metrics", help="per-epoch CSV (default <out>.metrics.csv)")
        p.add_argument("--epochs", type=int, help="override the number of epochs")
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", parents=[common], help="dump per-segment predictions for scoring")
    p.add_argument("--model", required=True, help="task checkpoint from train-mm / train-reg")
    p.add_argument("--extractor", help="override the extractor recorded in the checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default="test1_heldout_story,test2_heldout_subject")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("score", parents=[common], help="per-subject and weighted challenge score")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True, help="manifest.json for the set1/set2 routing")
    p.add_argument("--out", help="report CSV")
    p.set_defaults(fn=cmd_score)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    torch.manual_seed(args.seed)
    try:
        args.fn(args)
    except (
        CliError,
        ContainerError,
        CheckpointError,
        TrainingDivergedError,
        DegenerateInputError,
        ValueError,
        KeyError,
        OSError,
    ) as exc:
        print(f"eeg2vec {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return 0


if __name__ == "__main__":
    sys.exit(main())
