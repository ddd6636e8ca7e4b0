"""Command-line interface covering the whole workflow: corpus generation,
training, conversion, interpolation, evaluation, and mel plotting.

Every flag has a key=value equivalent in the file passed with --config;
explicit flags override file values, and each run echoes the fully resolved
configuration so it can be reproduced from the log alone. Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .arrayio import read_f32, write_f32
from .corpus import Corpus, GenConfig, generate_corpus
from .errors import DataError, NumericError, UsageError
from .inference import ConversionRequest, Synthesizer, render_pgm
from .metrics import (
    eer,
    oracle_identity,
    psd,
    psh,
    read_scored_pairs,
    sample_pairs,
    score_pairs,
    write_det_csv,
    write_report,
    write_scored_pairs,
)
from .model import ModelConfig
from .trainer import (
    TrainConfig,
    coerce_fields,
    load_run_config,
    run_training,
    save_run_config,
)

MODEL_FIELDS = tuple(f.name for f in fields(ModelConfig))
TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig))
GEN_FIELDS = tuple(f.name for f in fields(GenConfig))


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on bad flags; our contract reserves 2 for
    data errors, so parse failures are rethrown as usage errors instead."""

    def error(self, message):
        raise UsageError(message)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1"):
        return True
    if low in ("false", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, skip=()):
    for f in fields(cls):
        if f.name in skip:
            continue
        if f.type in ("bool", bool):
            parser.add_argument(_flag(f.name), dest=f.name, type=_parse_bool,
                                default=None, metavar="BOOL")
        elif f.type in ("int", int):
            parser.add_argument(_flag(f.name), dest=f.name, type=int,
                                default=None)
        elif f.type in ("float", float):
            parser.add_argument(_flag(f.name), dest=f.name, type=float,
                                default=None)
        else:
            parser.add_argument(_flag(f.name), dest=f.name, default=None)


def _resolve(args, allowed) -> dict:
    """Merge config-file values with explicit flags (flags win). Defaults are
    applied later, by the dataclasses or the per-command fallbacks."""
    raw = {}
    if getattr(args, "config", None) is not None:
        file_values = load_run_config(args.config)
        unknown = sorted(set(file_values) - set(allowed))
        if unknown:
            raise UsageError(
                f"unknown config keys for this command: {', '.join(unknown)}")
        raw.update(file_values)
    for key in allowed:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    return raw


def _require(resolved: dict, key: str) -> str:
    value = resolved.get(key)
    if value is None:
        raise UsageError(f"missing required option {_flag(key)}")
    return str(value)


def _as_int(resolved: dict, key: str, default: int) -> int:
    value = resolved.get(key, default)
    try:
        return int(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc


def _as_float(resolved: dict, key: str, default: float) -> float:
    value = resolved.get(key, default)
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc


def _echo(command: str, mapping: dict) -> None:
    print(f"[{command}] resolved config:")
    for key in sorted(mapping):
        print(f"  {key} = {mapping[key]}")


def _out_dir(resolved: dict) -> Path:
    out = Path(_require(resolved, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(resolved: dict) -> Path:
    path = Path(_require(resolved, "checkpoint"))
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return path


def _file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()[:16]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    allowed = GEN_FIELDS + ("out",)
    resolved = _resolve(args, allowed)
    out = _require(resolved, "out")
    cfg = coerce_fields(GenConfig,
                        {k: v for k, v in resolved.items() if k in GEN_FIELDS})
    _echo("gen-data", {**asdict(cfg), "out": out})
    manifest = generate_corpus(cfg, out)
    print(f"wrote {len(manifest.entries)} utterances for "
          f"{cfg.speakers} speakers to {out}")
    return 0


def _cmd_train(args) -> int:
    allowed = MODEL_FIELDS + TRAIN_FIELDS + ("data", "out", "resume",
                                             "log_every")
    resolved = _resolve(args, allowed)
    data = _require(resolved, "data")
    out = _out_dir(resolved)
    log_every = _as_int(resolved, "log_every", 50)
    resume = resolved.get("resume")

    corpus = Corpus.load(data)
    manifest = corpus.manifest
    model_raw = {
        "video_dim": manifest.video_dim,
        "face_dim": manifest.face_dim,
        "mel_bins": manifest.mel_bins,
        "mel_per_video_frame": manifest.mel_per_video_frame,
    }
    model_raw.update({k: v for k, v in resolved.items() if k in MODEL_FIELDS})
    model_cfg = coerce_fields(ModelConfig, model_raw)
    model_cfg.validate()
    train_cfg = coerce_fields(
        TrainConfig, {k: v for k, v in resolved.items() if k in TRAIN_FIELDS})
    train_cfg.validate()

    echoed = {**asdict(model_cfg), **asdict(train_cfg), "data": data,
              "out": str(out), "log_every": log_every,
              "resume": resume or ""}
    _echo("train", echoed)
    save_run_config(out / "config.txt", echoed)

    checkpoint = out / "checkpoint.pt"
    state = run_training(corpus, model_cfg, train_cfg,
                         checkpoint_path=checkpoint,
                         metrics_path=out / "metrics.jsonl",
                         resume_from=resume, log_every=log_every)
    print(f"finished at step {state.step}, checkpoint at {checkpoint}")
    return 0


def _load_faces(corpus: Corpus, utt_id: str):
    return corpus.load_utterance(utt_id).faces


def _write_mel(out: Path, mel) -> Path:
    path = out / "mel.f32"
    write_f32(path, mel)
    return path


def _cmd_synthesize(args) -> int:
    resolved = _resolve(args, ("checkpoint", "data", "utt", "out", "seed"))
    checkpoint = _checkpoint_path(resolved)
    corpus = Corpus.load(_require(resolved, "data"), preload=False)
    utt_id = _require(resolved, "utt")
    out = _out_dir(resolved)
    _echo("synthesize", {"checkpoint": str(checkpoint), "data": resolved["data"],
                         "utt": utt_id, "out": str(out),
                         "seed": _as_int(resolved, "seed", 0)})
    synth = Synthesizer.load(checkpoint)
    utt = corpus.load_utterance(utt_id)
    mel = synth.synthesize(utt.video, utt.faces)
    print(f"wrote {_write_mel(out, mel)}")
    return 0


def _cmd_convert(args) -> int:
    resolved = _resolve(args, ("checkpoint", "data", "content_utt",
                               "identity_utt", "out", "seed"))
    checkpoint = _checkpoint_path(resolved)
    corpus = Corpus.load(_require(resolved, "data"), preload=False)
    request = ConversionRequest(content_utt=_require(resolved, "content_utt"),
                                identity_utt=_require(resolved, "identity_utt"),
                                alpha=1.0)
    request.validate()
    out = _out_dir(resolved)
    _echo("convert", {"checkpoint": str(checkpoint), "data": resolved["data"],
                      "content_utt": request.content_utt,
                      "identity_utt": request.identity_utt, "out": str(out),
                      "seed": _as_int(resolved, "seed", 0)})
    synth = Synthesizer.load(checkpoint)
    content = corpus.load_utterance(request.content_utt)
    mel = synth.convert(content.video,
                        _load_faces(corpus, request.identity_utt))
    print(f"wrote {_write_mel(out, mel)}")
    return 0


def _cmd_interpolate(args) -> int:
    resolved = _resolve(args, ("checkpoint", "data", "content_utt",
                               "identity_utt", "identity_utt_b", "alpha",
                               "out", "seed"))
    checkpoint = _checkpoint_path(resolved)
    corpus = Corpus.load(_require(resolved, "data"), preload=False)
    alpha = _as_float(resolved, "alpha", 0.0)
    request = ConversionRequest(content_utt=_require(resolved, "content_utt"),
                                identity_utt=resolved.get("identity_utt"),
                                identity_utt_b=resolved.get("identity_utt_b"),
                                alpha=alpha)
    try:
        request.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(resolved)
    _echo("interpolate", {"checkpoint": str(checkpoint),
                          "data": resolved["data"],
                          "content_utt": request.content_utt,
                          "identity_utt": request.identity_utt or "",
                          "identity_utt_b": request.identity_utt_b or "",
                          "alpha": alpha, "out": str(out),
                          "seed": _as_int(resolved, "seed", 0)})
    synth = Synthesizer.load(checkpoint)
    content = corpus.load_utterance(request.content_utt)
    faces_a = _load_faces(corpus, request.identity_utt or request.content_utt)
    faces_b = (faces_a if request.identity_utt_b is None
               else _load_faces(corpus, request.identity_utt_b))
    mel = synth.interpolate(content.video, faces_a, faces_b, alpha)
    print(f"wrote {_write_mel(out, mel)}")
    return 0


def _cmd_evaluate(args) -> int:
    resolved = _resolve(args, ("checkpoint", "data", "sources", "targets",
                               "pairs", "seed", "out"))
    checkpoint = _checkpoint_path(resolved)
    data = _require(resolved, "data")
    out = _out_dir(resolved)
    n_sources = _as_int(resolved, "sources", 4)
    n_targets = _as_int(resolved, "targets", 8)
    n_pairs = _as_int(resolved, "pairs", 1600)
    seed = _as_int(resolved, "seed", 0)
    _echo("evaluate", {"checkpoint": str(checkpoint), "data": data,
                       "sources": n_sources, "targets": n_targets,
                       "pairs": n_pairs, "seed": seed, "out": str(out)})

    corpus = Corpus.load(data)
    if not corpus.manifest.synthetic:
        raise DataError("corpus manifest lacks token_pattern_mean; "
                        "evaluate needs a generated corpus")
    plan = sample_pairs(corpus.manifest, n_sources, n_targets, n_pairs, seed)
    synth = Synthesizer.load(checkpoint)

    # Converted mels are cached per (checkpoint, plan) so metric reruns and
    # interrupted evaluations never redo finished conversions.
    ckpt_hash = _file_hash(checkpoint)
    plan_blob = json.dumps(plan.to_json(), sort_keys=True).encode("utf-8")
    plan_hash = hashlib.sha256(plan_blob).hexdigest()[:16]
    cache = out / "cache" / f"{ckpt_hash}-{plan_hash}"
    cache.mkdir(parents=True, exist_ok=True)

    identities = {}
    for src, ident in plan.conversions():
        mel_path = cache / f"{src}__{ident}.f32"
        if mel_path.exists():
            mel = read_f32(mel_path)
        else:
            content = corpus.load_utterance(src)
            mel = synth.convert(content.video, _load_faces(corpus, ident))
            write_f32(mel_path, mel)
        identities[(src, ident)] = oracle_identity(mel, corpus.manifest)

    scored = score_pairs(plan, lambda s, t: identities[(s, t)])
    pos = [p.similarity for p in scored if p.label == "positive"]
    neg = [p.similarity for p in scored if p.label == "negative"]
    psh_value = psh(pos)
    psd_value = psd(neg)
    eer_value, curve = eer(pos, neg)

    (out / "plan.json").write_text(
        json.dumps(plan.to_json(), indent=1) + "\n", encoding="utf-8")
    write_scored_pairs(out / "pairs.jsonl", scored)
    write_det_csv(out / "det.csv", curve)
    write_report(out / "report.json", psh_value, psd_value, eer_value,
                 extra={"n_pairs": n_pairs, "n_sources": n_sources,
                        "n_targets": n_targets, "seed": seed,
                        "checkpoint_hash": ckpt_hash, "plan_hash": plan_hash,
                        "conversions": len(identities)})
    print(f"psh = {psh_value:.6f}")
    print(f"psd = {psd_value:.6f}")
    print(f"eer = {eer_value:.6f}")
    return 0


def _cmd_det_curve(args) -> int:
    resolved = _resolve(args, ("scores", "out", "seed"))
    scores_path = Path(_require(resolved, "scores"))
    if not scores_path.exists():
        raise DataError(f"scored pairs file not found: {scores_path}")
    out = _out_dir(resolved)
    _echo("det-curve", {"scores": str(scores_path), "out": str(out),
                        "seed": _as_int(resolved, "seed", 0)})
    scored = read_scored_pairs(scores_path)
    pos = [p.similarity for p in scored if p.label == "positive"]
    neg = [p.similarity for p in scored if p.label == "negative"]
    if not pos or not neg:
        raise DataError(f"{scores_path}: need both positive and negative pairs")
    eer_value, curve = eer(pos, neg)
    write_det_csv(out / "det.csv", curve)
    print(f"eer = {eer_value:.6f}")
    return 0


def _cmd_plot_mel(args) -> int:
    resolved = _resolve(args, ("mel", "out", "seed"))
    mel_path = Path(_require(resolved, "mel"))
    out = _out_dir(resolved)
    _echo("plot-mel", {"mel": str(mel_path), "out": str(out),
                       "seed": _as_int(resolved, "seed", 0)})
    mel = read_f32(mel_path)
    if mel.ndim != 2:
        raise DataError(f"{mel_path}: expected a 2-d mel, got shape {mel.shape}")
    target = out / (mel_path.stem + ".pgm")
    render_pgm(mel, target)
    print(f"wrote {target}")
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="silentvc",
                     description="silent-video voice conversion toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="key=value file; flags override its values")
        p.add_argument("--out", default=None, help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", _cmd_gen_data, "generate a synthetic corpus")
    _add_dataclass_flags(p, GenConfig, skip=("utts_per_speaker",))
    p.add_argument("--utts", dest="utts_per_speaker", type=int, default=None,
                   help="utterances per speaker")

    p = add("train", _cmd_train, "train a conversion model")
    p.add_argument("--data", default=None, help="corpus directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--log-every", dest="log_every", type=int, default=None)
    _add_dataclass_flags(p, ModelConfig)
    _add_dataclass_flags(p, TrainConfig)

    p = add("synthesize", _cmd_synthesize,
            "reconstruct an utterance with its own identity")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--utt", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = add("convert", _cmd_convert, "convert an utterance to a new identity")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--content-utt", dest="content_utt", default=None)
    p.add_argument("--identity-utt", dest="identity_utt", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = add("interpolate", _cmd_interpolate,
            "blend two identities at a given alpha")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--content-utt", dest="content_utt", default=None)
    p.add_argument("--identity-utt", dest="identity_utt", default=None)
    p.add_argument("--identity-utt-b", dest="identity_utt_b", default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = add("evaluate", _cmd_evaluate,
            "run the conversion benchmark and write a report")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--sources", type=int, default=None,
                   help="number of source speakers")
    p.add_argument("--targets", type=int, default=None,
                   help="number of target speakers")
    p.add_argument("--pairs", type=int, default=None,
                   help="positive and negative pairs each")
    p.add_argument("--seed", type=int, default=None)

    p = add("det-curve", _cmd_det_curve,
            "recompute the DET curve from scored pairs")
    p.add_argument("--scores", default=None, help="pairs.jsonl from evaluate")
    p.add_argument("--seed", type=int, default=None)

    p = add("plot-mel", _cmd_plot_mel, "render a .f32 mel as a PGM image")
    p.add_argument("--mel", default=None, help="path to mel .f32 file")
    p.add_argument("--seed", type=int, default=None)

    return parser


def run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        raise UsageError("missing subcommand (see --help)")
    return args.func(args)


def main(argv=None) -> int:
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
