"""Command-line entry point: ``wavelldm <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from .audio import AudioClip, DegradationSpec, degrade, load_wav, resample, save_wav
from .config import field_types, load_config

CONFIG_KEYS = [k for k in field_types() if k != "stage"]


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file of TrainConfig keys")
    p.add_argument("--resume", help="checkpoint to continue from")
    for key, kind in field_types().items():
        if key in ("stage", "seed"):
            continue
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavelldm", description="Latent-diffusion speech restoration.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None)
        return p

    _add_train_flags(command("train-codec", "stage 1: train the neural audio codec"))
    _add_train_flags(command("train-diffusion", "stage 2: train the latent diffusion estimator"))

    for name, help_ in (("enhance", "restore a noisy recording"), ("inpaint", "fill a masked gap")):
        p = command(name, help_)
        p.add_argument("--checkpoint", required=True, help="diffusion checkpoint (includes the codec)")
        p.add_argument("--input", required=True)
        p.add_argument("--output", required=True)
        if name == "inpaint":
            p.add_argument("--mask-ms", type=float, default=0.0, help="zero a gap of this length first (0: input is already masked)")
            p.add_argument("--mask-start-ms", type=float, default=None, help="gap start; random (from --seed) if omitted")
            p.add_argument("--masked-output", help="also write the masked input here")

    p = command("evaluate", "score estimates against references (LSD, STOI)")
    p.add_argument("--reference", required=True, help="directory of clean WAV files")
    p.add_argument("--estimate", required=True, help="directory of WAV files with matching names")
    p.add_argument("--report", required=True, help="output TSV report")

    p = command("inspect-checkpoint", "list checkpoint entries and shapes")
    p.add_argument("path")
    return parser


def _train(args, stage: str) -> int:
    from .train import load_dataset, train_codec, train_diffusion

    overrides = {k: getattr(args, k) for k in CONFIG_KEYS if k != "seed"}
    overrides["seed"] = args.seed
    cfg = load_config(args.config, stage, overrides)
    clips = load_dataset(cfg.data)
    if stage == "codec":
        result = train_codec(cfg, clips, resume=args.resume)
    else:
        result = train_diffusion(cfg, clips, resume=args.resume)
    last = result.losses[-1] if result.losses else {}
    print(f"checkpoint\t{result.checkpoint}")
    if last:
        key = "total" if stage == "codec" else "loss"
        print(f"final_{key}\t{last[key]:.6g}")
    return 0


def _restore_file(args, mask: bool) -> int:
    from .train import CODEC_RATE, Restorer

    seed = args.seed or 0
    clip = load_wav(args.input)
    work = clip if clip.sample_rate == CODEC_RATE else resample(clip, CODEC_RATE)
    if mask and args.mask_ms > 0:
        rng = np.random.default_rng(seed)
        if args.mask_start_ms is None:
            work, _ = degrade(work, DegradationSpec("mask", args.mask_ms), rng)
        else:
            start = int(round(args.mask_start_ms * CODEC_RATE / 1000))
            length = int(round(args.mask_ms * CODEC_RATE / 1000))
            if start < 0 or start + length > work.samples.size:
                raise ValueError(f"gap [{start}, {start + length}) falls outside the clip ({work.samples.size} samples)")
            x = work.samples.copy()
            x[start : start + length] = 0.0
            work = AudioClip(x, CODEC_RATE)
        if args.masked_output:
            save_wav(work, args.masked_output)
    y = Restorer.from_checkpoint(args.checkpoint)(work.samples, seed=seed)
    out = AudioClip(np.clip(y, -1.0, 1.0), CODEC_RATE)
    if clip.sample_rate != CODEC_RATE:
        out = resample(out, clip.sample_rate)
        n = clip.samples.size
        out = AudioClip(np.pad(out.samples[:n], (0, max(0, n - out.samples.size))), clip.sample_rate)
    save_wav(out, args.output)
    return 0


def _evaluate(args) -> int:
    from ..metrics import evaluate_set, write_report

    ref_dir, est_dir = Path(args.reference), Path(args.estimate)
    pairs = []
    for ref in sorted(ref_dir.glob("*.wav")):
        est = est_dir / ref.name
        if not est.exists():
            raise FileNotFoundError(f"no estimate for {ref.name} in {est_dir}")
        a, b = load_wav(ref), load_wav(est)
        if a.sample_rate != b.sample_rate:
            raise ValueError(f"{ref.name}: sample rates differ ({a.sample_rate} vs {b.sample_rate})")
        n = min(a.samples.size, b.samples.size)
        pairs.append((ref.name, a.samples[:n], b.samples[:n]))
    if not pairs:
        raise ValueError(f"no WAV files in {ref_dir}")
    rows, summary = evaluate_set(pairs, load_wav(sorted(ref_dir.glob("*.wav"))[0]).sample_rate)
    write_report(args.report, rows, summary)
    print(f"{summary.path}\tlsd={summary.lsd:.4f}\tstoi={summary.stoi:.4f}")
    return 0


def _inspect(args) -> int:
    entries = ck.load_checkpoint(args.path)
    for name, value in entries.items():
        print(f"{name}\t{'x'.join(map(str, value.shape)) or 'scalar'}")
    if "meta.config" in entries:
        print("# config")
        print(ck.entry_text(entries["meta.config"]).rstrip())
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train-codec":
            return _train(args, "codec")
        if args.command == "train-diffusion":
            return _train(args, "diffusion")
        if args.command == "enhance":
            return _restore_file(args, mask=False)
        if args.command == "inpaint":
            return _restore_file(args, mask=True)
        if args.command == "evaluate":
            return _evaluate(args)
        return _inspect(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"wavelldm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
