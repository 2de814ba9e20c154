"""Command-line entry point: ``avwhisper <command> [options]``.

Every command accepts ``--config FILE`` with ``key = value`` lines; keys are
option names (``batch-pairs`` or ``batch_pairs``) and explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .containers import ContainerError, read_features, read_lips, write_features, write_lips
from .corpus import (
    ManifestError,
    PairedManifest,
    UtteranceRecord,
    compute_stats,
    load_manifest,
    pair_utterances,
    parse_ratios,
    save_manifest,
    split_by_speaker,
)
from .evaluation import EvalReport, score_corpus
from .features import FeatureError, audio_frontend, load_wav
from .lipgeom import GeometryError, crop_video, read_landmarks
from .model import CharTokenizer, ModelConfig, ModelError, build_model
from .train import (
    Example,
    TrainConfig,
    TrainingError,
    make_example,
    make_pairs,
    train_stage1,
    train_stage2,
    transcribe_examples,
    write_step_log,
)

log = logging.getLogger("avwhisper")

VALIDATION_ERRORS = (
    ManifestError,
    FeatureError,
    GeometryError,
    ContainerError,
    CheckpointError,
    ModelError,
    TrainingError,
    FileNotFoundError,
    KeyError,
    ValueError,
)


class UsageError(Exception):
    """Bad input detected before any work starts."""


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _require_dir(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} not found: {p}")
    return p


def _root_for(args) -> Path:
    # manifest paths are relative to the manifest's directory unless --root says otherwise
    return Path(args.root) if args.root else Path(args.manifest).parent


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .synth import make_synthetic_corpus

    corpus = make_synthetic_corpus(args.speakers, args.utts, seed=args.seed, video_fraction=args.video_fraction)
    corpus.write(args.out)
    print(f"wrote {len(corpus.manifest.records)} utterances for {args.speakers} speakers to {args.out}")
    return 0


def cmd_prepare(args) -> int:
    """Scan ``<root>/<speaker>/<normal|whisper>/<utt>.wav`` (+ .txt, optional .npy/.lm) into a manifest."""
    root = _require_dir(args.root, "corpus directory")
    out = Path(args.out)
    lang_file = root / "language"
    language = args.language or (lang_file.read_text().strip() if lang_file.is_file() else "zh")
    base = out.parent.resolve()
    records = []
    for wav in sorted(root.glob("*/*/*.wav")):
        stype = wav.parent.name
        if stype not in ("normal", "whisper"):
            log.warning("skipping %s: unknown speech type directory", wav)
            continue
        txt = wav.with_suffix(".txt")
        if not txt.is_file():
            raise UsageError(f"transcript missing for {wav}")
        video, lms = wav.with_suffix(".npy"), wav.with_suffix(".lm")
        has_video = video.is_file() and lms.is_file()
        w = load_wav(wav)
        rel = lambda p: os.path.relpath(p.resolve(), base)  # noqa: E731
        records.append(
            UtteranceRecord(
                utt_id=wav.stem,
                speaker_id=wav.parent.parent.name,
                speech_type=stype,  # type: ignore[arg-type]
                text=txt.read_text(encoding="utf-8").strip(),
                audio_path=rel(wav),
                video_path=rel(video) if has_video else None,
                landmarks_path=rel(lms) if has_video else None,
                duration_s=w.duration_s,
                language=language,
            )
        )
    if not records:
        raise UsageError(f"no utterances found under {root}")
    manifest = PairedManifest.from_records(records)
    manifest.validate()
    save_manifest(manifest, out)
    print(f"{len(records)} utterances -> {out}")
    return 0


def cmd_pair(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    paired = pair_utterances(manifest)
    save_manifest(paired, args.out or args.manifest)
    print(f"pairs\t{len(paired.pairs)}\nunpaired\t{len(paired.unpaired)}")
    return 0


def cmd_split(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    ratios = parse_ratios(args.ratios)
    out = Path(args.out_dir)
    for part in split_by_speaker(manifest.records.values(), ratios, seed=args.seed):
        if manifest.is_paired:
            part = pair_utterances(part)
        save_manifest(part, out / f"{part.split}.jsonl")
        speakers = len({r.speaker_id for r in part.records.values()})
        print(f"{part.split}\t{speakers}\t{len(part.records)}")
    return 0


def cmd_crop_lips(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    root = _root_for(args)
    out = Path(args.out)
    todo = [r for r in manifest.records.values() if r.has_video]
    for rec in todo:
        _require_file(root / rec.video_path, "video")
        _require_file(root / rec.landmarks_path, "landmarks")
    out.mkdir(parents=True, exist_ok=True)
    for rec in todo:
        frames = np.load(root / rec.video_path)
        crops = crop_video(frames, read_landmarks(root / rec.landmarks_path), smooth=not args.no_smooth)
        if frames.dtype == np.uint8:
            crops = np.clip(np.rint(crops), 0, 255).astype(np.uint8)
        write_lips(out / f"{rec.utt_id}.lips", crops)
    print(f"cropped {len(todo)} videos -> {out}")
    return 0


def cmd_featurize(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    root = _root_for(args)
    for rec in manifest.records.values():
        _require_file(root / rec.audio_path, "audio")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rec in manifest.records.values():
        write_features(out / f"{rec.utt_id}.mel", audio_frontend(load_wav(root / rec.audio_path), args.n_mels).frames)
    print(f"featurized {len(manifest.records)} utterances -> {out}")
    return 0


def _load_examples(
    manifest: PairedManifest, features: Path, lips: Path | None, tok: CharTokenizer
) -> dict[str, Example]:
    for uid in manifest.records:
        _require_file(features / f"{uid}.mel", "features")
    out = {}
    for uid, rec in manifest.records.items():
        crop = None
        if lips is not None and (lips / f"{uid}.lips").is_file():
            crop = read_lips(lips / f"{uid}.lips")
        out[uid] = make_example(
            uid, rec.speech_type, rec.language, rec.text, read_features(features / f"{uid}.mel"), tok, crop
        )
    return out


def cmd_train(args) -> int:
    if args.stage == 2 and not args.init:
        raise UsageError("stage 2 needs a stage-1 checkpoint: pass --init <stage-1 checkpoint>")
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    features = _require_dir(args.features, "feature directory")
    lips = _require_dir(args.lips, "lip crop directory") if args.lips else None
    if args.init:
        _require_file(args.init, "initial checkpoint")
    branches = tuple(b.strip() for b in args.branches.split(",") if b.strip())
    if not branches or set(branches) - {"whisper", "normal"}:
        raise UsageError(f"--branches must name whisper and/or normal, got {args.branches!r}")

    if args.init:
        model, meta = load_checkpoint(args.init, for_stage=args.stage)
        log.info("initialized from %s (stage %d)", args.init, meta["stage"])
    else:
        tok = CharTokenizer.from_texts(r.text for r in manifest.records.values())
        cfg = ModelConfig(
            vocab=tok.vocab,
            d_model=args.d_model,
            n_heads=args.heads,
            enc_layers=args.layers,
            dec_layers=args.layers,
            visual_dim=args.visual_dim,
            n_mels=args.n_mels,
        )
        model = build_model(cfg, seed=args.seed)
    examples = _load_examples(manifest, features, lips, model.tokenizer)
    too_long = [e.utt_id for e in examples.values() if len(e.targets) > model.cfg.max_text_len + 1]
    if too_long:
        raise UsageError(f"transcripts exceed max_text_len: {too_long[:5]}")
    cfg = TrainConfig(
        stage=args.stage,
        epochs=args.epochs,
        batch_pairs=args.batch_pairs,
        lr=args.lr,
        seed=args.seed,
        warmup_steps=args.warmup_steps,
        branches=branches,
    )
    trainer = train_stage1 if args.stage == 1 else train_stage2
    result = trainer(make_pairs(manifest, examples), model, cfg)
    out = Path(args.out)
    checksum = save_checkpoint(out, model, stage=args.stage, seed=args.seed)
    steps = out.with_suffix(".steps.tsv")
    write_step_log(steps, result.curve)
    from .plotting import plot_loss_curve

    plot_loss_curve(result.curve, out.with_suffix(".loss.png"), title=f"stage {args.stage}")
    last = result.curve[-1]
    print(
        f"stage\t{args.stage}\nsteps\t{len(result.curve)}\nL_total\t{last.L_total:.6f}\ncheckpoint\t{out}\nsha256\t{checksum}"
    )
    return 0


def _read_hyps(path: Path) -> dict[str, str]:
    """``utt_id<TAB>hypothesis`` per line."""
    hyps = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        uid, _, text = line.partition("\t")
        if uid in hyps:
            raise UsageError(f"{path}:{lineno}: duplicate hypothesis for {uid!r}")
        hyps[uid] = text
    return hyps


def _write_report(report: EvalReport, hyps: dict[str, str], path: Path) -> dict:
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = {
        "type": "summary",
        "unit": report.unit,
        "language": report.language,
        "aggregate": report.aggregate,
        "by_speech_type": report.by_speech_type(),
        "utterances": len(report.per_utt),
        "skipped": report.skipped,
    }
    with path.open("w", encoding="utf-8") as fh:
        for s in report.per_utt:
            row = {
                "type": "utterance",
                "utt_id": s.utt_id,
                "speech_type": s.speech_type,
                "hyp": hyps[s.utt_id],
                "S": s.substitutions,
                "D": s.deletions,
                "I": s.insertions,
                "ref_len": s.ref_len,
                "error_rate": s.error_rate,
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        fh.write(json.dumps(summary, ensure_ascii=False) + "\n")
    return summary


def cmd_evaluate(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    if args.hyps:
        hyps = _read_hyps(_require_file(args.hyps, "hypothesis file"))
    else:
        if not (args.ckpt and args.features):
            raise UsageError("evaluate needs --hyps, or --ckpt together with --features")
        _require_file(args.ckpt, "checkpoint")
        features = _require_dir(args.features, "feature directory")
        lips = _require_dir(args.lips, "lip crop directory") if args.lips else None
        model, meta = load_checkpoint(args.ckpt)
        examples = _load_examples(manifest, features, lips, model.tokenizer)
        fusion = meta["stage"] == 2 and not args.no_fusion
        hyps = transcribe_examples(model, list(examples.values()), fusion_enabled=fusion)
    refs = {u: r.text for u, r in manifest.records.items()}
    missing = sorted(set(refs) - set(hyps))
    extra = sorted(set(hyps) - set(refs))
    if extra:
        raise UsageError(f"hypotheses without a reference: {extra[:5]}")
    report = score_corpus(refs, hyps, args.language, args.unit, {u: r.speech_type for u, r in manifest.records.items()})
    report_path = Path(args.report)
    summary = _write_report(report, hyps, report_path)
    from .plotting import plot_error_histogram

    plot_error_histogram(report, report_path.with_suffix(".png"))
    metric = "CER" if args.unit == "char" else "WER"
    print(f"{metric}\t{summary['aggregate']:.6f}")
    for stype, rate in summary["by_speech_type"].items():
        print(f"{metric}_{stype}\t{rate:.6f}")
    print(f"utterances\t{summary['utterances']}\nskipped\t{len(report.skipped)}")
    if missing:
        print(f"error: {len(missing)} utterance(s) have no hypothesis: {missing[:5]}", file=sys.stderr)
        return 1
    return 0


def cmd_stats(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    stats = compute_stats(manifest)
    sep = {"tab": "\t", "comma": ",", "pipe": " | "}[args.sep]
    sys.stdout.write(stats.render(sep=sep, set_name=args.set_name))
    if args.plot:
        from .plotting import plot_stats

        plot_stats(stats, args.plot)
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file of option defaults")
    common.add_argument("--seed", type=int, default=0, help="single source of randomness (default 0)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="avwhisper", description="Whisper/normal speech recognition toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name: str, fn: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help, description=help)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic parallel corpus on disk")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=8)
    p.add_argument("--utts", type=int, default=20, help="paired utterances per speaker")
    p.add_argument("--video-fraction", type=float, default=0.75)

    p = add("prepare", cmd_prepare, "scan a corpus directory into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--language", choices=("zh", "en"))

    p = add("pair", cmd_pair, "pair each whisper utterance with its closest normal transcript")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="defaults to rewriting --manifest")

    p = add("split", cmd_split, "speaker-disjoint train/valid/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratios", default="4:1:1")
    p.add_argument("--out-dir", required=True)

    p = add("crop-lips", cmd_crop_lips, "crop 96x96 lip regions from videos and landmarks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--out", required=True)
    p.add_argument("--no-smooth", action="store_true", help="disable the 5-frame center smoothing")

    p = add("featurize", cmd_featurize, "extract log-mel features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--out", required=True)
    p.add_argument("--n-mels", type=int, default=80)

    p = add("train", cmd_train, "stage 1 (parallel audio) or stage 2 (gated visual fusion) training")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--lips")
    p.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    p.add_argument("--out", required=True, help="checkpoint path; step log and loss plot go alongside")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-pairs", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup-steps", type=int, default=0)
    p.add_argument("--branches", default="whisper,normal")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--visual-dim", type=int, default=64)
    p.add_argument("--n-mels", type=int, default=80)

    p = add("evaluate", cmd_evaluate, "score transcripts; decodes with --ckpt unless --hyps is given")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--features")
    p.add_argument("--lips")
    p.add_argument("--hyps", help="utt_id<TAB>hypothesis file")
    p.add_argument("--no-fusion", action="store_true", help="ignore video even with a stage-2 checkpoint")
    p.add_argument("--unit", choices=("char", "word"), default="char")
    p.add_argument("--language", choices=("zh", "en"), default="zh")
    p.add_argument("--report", required=True)

    p = add("stats", cmd_stats, "per-split duration and utterance table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sep", choices=("tab", "comma", "pipe"), default="tab")
    p.add_argument("--set-name")
    p.add_argument("--plot", help="also write a bar chart to this PNG")

    return parser


def read_config(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _config_path(argv: Sequence[str]) -> str | None:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, command: str, path: str) -> None:
    """Turn config entries into subcommand defaults so explicit flags still win."""
    values = read_config(_require_file(path, "config file"))
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}  # noqa: SLF001
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"{path}: unknown option(s) {unknown}")
    defaults = {}
    for key, text in values.items():
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            defaults[key] = text.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[key] = action.type(text) if action.type else text
            except ValueError as exc:
                raise UsageError(f"{path}: bad value for {key}: {text!r}") from exc
            if action.choices is not None and defaults[key] not in action.choices:
                raise UsageError(f"{path}: {key} must be one of {list(action.choices)}")
        action.required = False
    sub.set_defaults(**defaults)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        config = _config_path(argv)
        if config and argv and argv[0] in _commands(parser):
            _apply_config(parser, argv[0], config)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
        )
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def _commands(parser: argparse.ArgumentParser) -> set[str]:
    return set(next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices)  # noqa: SLF001


if __name__ == "__main__":
    sys.exit(main())
