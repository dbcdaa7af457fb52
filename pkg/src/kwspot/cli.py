"""Command-line surface.

Each subcommand is a thin wrapper over one module operation.  All file
outputs are pure functions of their inputs and the seed, so rerunning a
command reproduces its artifacts byte for byte.  Faults print a single
{"error": ...} line on stderr; a broken manifest exits with 2, anything
else domain-level with 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import __version__
from .config import RunConfig, load_run_config, resolve_min_duration
from .errors import InvalidConfig, KwsError, ManifestError

DEFAULT_SEED = 777


def _fail(message: str) -> None:
    print(json.dumps({"error": message}), file=sys.stderr)


def _say(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_config(path: str | None) -> RunConfig:
    return load_run_config(path) if path else RunConfig()


def _effective_seed(args, cfg: RunConfig | None = None) -> int:
    if args.seed is not None:
        return args.seed
    if cfg is not None:
        return cfg.train.seed
    return DEFAULT_SEED


def cmd_cmvn(args) -> int:
    from .dataio import load_manifest
    from .features import compute_cmvn

    cfg = _load_config(args.config)
    entries = load_manifest(args.manifest)
    stats = compute_cmvn(entries, cfg.features)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(stats.to_dict(), sort_keys=True) + "\n")
    _say({"frames": stats.frame_count, "out": args.out})
    return 0


def _keyword_names(cfg: RunConfig, entries) -> list[str]:
    if cfg.keywords is not None:
        return list(cfg.keywords)
    top = max((e.label for e in entries), default=-1)
    if top < 0:
        raise InvalidConfig("manifest holds no keyword labels; cannot size the model")
    return [f"keyword{i}" for i in range(top + 1)]


def cmd_train(args) -> int:
    from .dataio import load_manifest
    from .features import compute_cmvn
    from .models import build_model
    from .trainer import list_checkpoints, train

    cfg = _load_config(args.config)
    seed = _effective_seed(args, cfg)
    train_entries = load_manifest(args.train)
    dev_entries = load_manifest(args.dev)
    cfg = resolve_min_duration(cfg, train_entries)
    names = _keyword_names(cfg, train_entries + dev_entries)
    tcfg = replace(cfg.train, checkpoint_dir=args.dir, seed=seed)

    stats = compute_cmvn(train_entries, cfg.features)
    model = build_model(
        cfg.backbone,
        len(names),
        stats,
        feature_config=cfg.features,
        seed=seed,
    )
    model.keywords = names
    model.meta["run_config"] = cfg.to_dict()

    resume = bool(list_checkpoints(args.dir))
    if resume:
        print(f"resuming from checkpoints in {args.dir}", file=sys.stderr)

    def progress(rec: dict) -> None:
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)

    records = train(
        model, train_entries, dev_entries, tcfg, resume=resume, log_fn=progress
    )
    _say({"checkpoint_dir": args.dir, "epochs_run": len(records)})
    return 0


def cmd_average(args) -> int:
    from .container import save_model
    from .trainer import average_checkpoints

    model = average_checkpoints(args.dir, top_n=args.num)
    save_model(model, args.out)
    _say({"averaged_from": model.meta.get("averaged_from", []), "out": args.out})
    return 0


def cmd_score(args) -> int:
    from .container import load_model
    from .dataio import load_manifest
    from .evalkit import save_scores, score_manifest

    model = load_model(args.model)
    entries = load_manifest(args.manifest)
    records = score_manifest(model, entries)
    save_scores(records, args.out)
    _say({"scored": len(records), "out": args.out})
    return 0


def cmd_det(args) -> int:
    from .evalkit import det_curve, load_scores, save_det_csv

    records = load_scores(args.scores)
    curve = det_curve(records, args.keyword)
    save_det_csv(curve, args.out)
    _say({"keyword": args.keyword, "points": len(curve.thresholds), "out": args.out})
    return 0


def _parse_thresholds(pairs, keywords: list[str], defaults) -> list[float] | None:
    """--threshold entries name=v or index=v; unset heads keep their default."""
    if not pairs:
        return None
    out: dict[int, float] = {}
    for pair in pairs:
        name, sep, raw = pair.partition("=")
        if not sep:
            raise InvalidConfig(f"--threshold wants keyword=value, got {pair!r}")
        try:
            value = float(raw)
        except ValueError as e:
            raise InvalidConfig(f"--threshold {pair!r}: bad value") from e
        if name in keywords:
            idx = keywords.index(name)
        else:
            try:
                idx = int(name)
            except ValueError:
                raise InvalidConfig(
                    f"--threshold {pair!r}: unknown keyword (have {keywords})"
                ) from None
            if not 0 <= idx < len(keywords):
                raise InvalidConfig(f"--threshold {pair!r}: index out of range")
        out[idx] = value
    return [out.get(i, float(defaults[i])) for i in range(len(keywords))]


def cmd_detect(args) -> int:
    from .container import load_container, load_model
    from .dataio import read_wav, resample
    from .detector import (
        load_quantized,
        make_stream,
        push_audio,
        push_audio_int8,
        quantize,
    )
    from .models import fold_inference

    metadata, _ = load_container(args.model)
    if metadata.get("quantized"):
        qmodel = load_quantized(args.model)
        model, push = qmodel, push_audio_int8
    elif args.int8:
        qmodel = quantize(fold_inference(load_model(args.model)))
        model, push = qmodel, push_audio_int8
    else:
        model, push = load_model(args.model), push_audio

    thresholds = _parse_thresholds(
        args.threshold, list(model.keywords), model.thresholds
    )
    state = make_stream(model, thresholds=thresholds)
    clip = resample(read_wav(args.wav), model.feature_config.sample_rate)
    _, _, events = push(state, model, clip.samples)
    names = list(model.keywords)
    for d in events:
        print(
            json.dumps(
                {
                    "keyword": names[d.keyword],
                    "time_ms": round(d.time_ms, 3),
                    "score": round(d.score, 6),
                },
                sort_keys=True,
            )
        )
    return 0


def cmd_quantize(args) -> int:
    from .container import load_model
    from .detector import quantize, save_quantized
    from .models import fold_inference

    qmodel = quantize(fold_inference(load_model(args.model)))
    save_quantized(qmodel, args.out)
    _say({"out": args.out})
    return 0


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--seed",
        type=int,
        default=None,
        help=f"seed for all randomness (default {DEFAULT_SEED}, or the config's)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kwspot", description="keyword spotting: train, evaluate, detect"
    )
    parser.add_argument("--version", action="version", version=f"kwspot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cmvn", help="compute global feature statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_cmvn)

    p = sub.add_parser("train", help="train a model, one checkpoint per epoch")
    p.add_argument("--config", default=None)
    p.add_argument("--train", required=True, help="training manifest (JSONL)")
    p.add_argument("--dev", required=True, help="development manifest (JSONL)")
    p.add_argument("--dir", required=True, help="checkpoint directory")
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("average", help="average the best checkpoints")
    p.add_argument("--dir", required=True)
    p.add_argument("--num", type=int, default=30)
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("score", help="peak scores for every manifest utterance")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("det", help="DET curve from a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keyword", type=int, default=0, help="keyword index")
    _add_seed(p)
    p.set_defaults(func=cmd_det)

    p = sub.add_parser("detect", help="stream a WAV and print detections")
    p.add_argument("--model", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--int8", action="store_true", help="quantize and run int8")
    p.add_argument(
        "--threshold",
        action="append",
        default=[],
        metavar="KEYWORD=VALUE",
        help="per-keyword threshold override (repeatable)",
    )
    _add_seed(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("quantize", help="fold and quantize a model to int8")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_quantize)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ManifestError as e:
        _fail(str(e))
        return 2
    except KwsError as e:
        _fail(str(e))
        return 1
    except OSError as e:
        _fail(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
