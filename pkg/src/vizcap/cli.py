"""Command-line entry point: ``vizcap <subcommand> [flags]``.

Config files hold ``key = value`` lines (``#`` starts a comment); keys are
flag names with dashes or underscores.  Flags given on the command line
win over config values.  Progress goes to stderr, data to stdout or files.

Exit codes: 0 ok, 1 usage, 2 validation, 3 runtime.  Failures print one
JSON object ``{"error", "message", "exit_code"}`` on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__, metrics
from .ablation import run_ablation, write_tsv
from .data import Dataset, SynthSpec, prepare_examples, synth_generate
from .embeddings import Embedder, Lexicon
from .model import CaptionModel, ModelConfig, VocabularyMismatch
from .optim import Adam, OptimizerConfig
from .perception import ChannelLimits, intelligible_count, read_detections, select_orientation
from .plotting import plot_ablation, plot_metric_histogram, plot_training_log
from .postprocess import STRATEGIES, CandidateSet, EmbeddingSimilarity, bow_cosine_similarity, rerank
from . import container
from .text import normalize
from .training import TrainConfig, TrainLog, decode_examples, train_ce, train_scst

log = logging.getLogger("vizcap")

EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 1, 2, 3


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config and manifests ------------------------------------------------------


def read_config(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def git_blob_sha1(path) -> str:
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        if p is None:
            continue
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                full = os.path.join(p, name)
                if os.path.isfile(full):
                    out[full] = git_blob_sha1(full)
        elif os.path.isfile(p):
            out[p] = git_blob_sha1(p)
    return out


def write_manifest(args, inputs, manifest_path) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "subcommand": args.command,
        "argv": sys.argv[1:],
        "config_path": args.config,
        "seed": args.seed,
        "resolved": resolved,
        "inputs": hash_inputs(inputs),
        "outputs": args.out,
        "version": __version__,
    }
    _claim(manifest_path, args.overwrite)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)


def _claim(path, overwrite: bool) -> None:
    if os.path.exists(path) and not overwrite:
        raise ValidationError(f"{path} exists; refusing to overwrite (pass --overwrite)")


def _claim_dir(path, overwrite: bool) -> None:
    if os.path.isdir(path) and os.listdir(path) and not overwrite:
        raise ValidationError(f"{path} is not empty; refusing to overwrite (pass --overwrite)")
    os.makedirs(path, exist_ok=True)


def _write_json(path, obj) -> None:
    if path in (None, "-"):
        json.dump(obj, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)


def _read_json_records(path) -> list:
    """A JSON array, a single object, ``{"annotations": [...]}`` or JSON lines."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    if isinstance(obj, dict):
        return obj.get("annotations", [obj])
    return obj


# -- shared builders -------------------------------------------------------


def _limits(args) -> ChannelLimits:
    return ChannelLimits(max_ocr=args.max_ocr, max_obj=args.max_obj, obj_threshold=args.obj_threshold)


def _model_config(args, dataset: Dataset) -> ModelConfig:
    mods = {m.strip().lower() for m in args.modalities.split(",")}
    feats = dataset.records[0].features
    return ModelConfig(d=args.d, heads=args.heads, encoder_layers=args.layers, decoder_layers=args.layers,
                       max_decode_len=args.max_len, copy_enabled=args.copy, use_ocr="ocr" in mods,
                       use_obj="obj" in mods, dropout=args.dropout, n_pixel=feats.shape[0],
                       img_dim=feats.shape[1], txt_dim=args.txt_dim, max_ocr=args.max_ocr,
                       max_obj=args.max_obj, vocab_size=len(dataset.vocab), seed=args.seed)


def _train_config(args) -> TrainConfig:
    return TrainConfig(ce_epochs=args.ce_epochs, batch_size=args.batch_size,
                       scst_epochs=args.scst_epochs, seed=args.seed, base_lr=args.lr,
                       warmup_steps=args.warmup, scst_offset=args.scst_offset)


def _limits_from_model(model: CaptionModel, args) -> ChannelLimits:
    return ChannelLimits(max_ocr=model.config.max_ocr, max_obj=model.config.max_obj,
                         obj_threshold=args.obj_threshold)


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args):
    _claim_dir(args.out, args.overwrite)
    spec = SynthSpec(n_images=args.n_images, n_brands=args.n_brands, text_fraction=args.text_fraction,
                     rotation_fraction=args.rotation_fraction, oov_plant_fraction=args.oov_plant_fraction,
                     val_fraction=args.val_fraction, n_refs=args.n_refs, n_pixel=args.n_pixel,
                     img_dim=args.img_dim, confusion_rate=args.confusion_rate, seed=args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    ds = synth_generate(spec)
    ds.save(args.out)
    log.info("wrote %d records to %s", len(ds.records), args.out)
    write_manifest(args, [], os.path.join(args.out, "run_manifest.json"))


def cmd_train_ce(args):
    ds = Dataset.load(args.data)
    _claim_dir(args.out, args.overwrite)
    mc = _model_config(args, ds)
    tc = _train_config(args)
    emb = Embedder(mc.txt_dim)
    train_ex = prepare_examples(ds, "train", emb, _limits(args))
    tlog = TrainLog(os.path.join(args.out, "train_log.jsonl"))
    model = CaptionModel(mc, ds.vocab)
    ce = train_ce(model, train_ex, tc, tlog)
    model.save(args.out, ce.optimizer, {"stage": "ce", "step": ce.schedule.step,
                                        "train_config": asdict(tc)})
    plot_training_log(tlog.rows, os.path.join(args.out, "train_curve.png"))
    write_manifest(args, [args.data], os.path.join(args.out, "run_manifest.json"))


def cmd_train_scst(args):
    ds = Dataset.load(args.data)
    model = CaptionModel.load(args.init)
    with open(os.path.join(args.init, "manifest.json"), encoding="utf-8") as fh:
        init_manifest = json.load(fh)
    _claim_dir(args.out, args.overwrite)
    tc = _train_config(args)
    emb = Embedder(model.config.txt_dim)
    train_ex = prepare_examples(ds, "train", emb, _limits_from_model(model, args))
    opt = Adam(model.params, OptimizerConfig(base_lr=args.lr, warmup_steps=args.warmup))
    optim_path = os.path.join(args.init, "optim.bin")
    if os.path.exists(optim_path):
        opt.load_state_tensors(container.load(optim_path))
    tlog = TrainLog(os.path.join(args.out, "train_log.jsonl"))
    sc = train_scst(model, train_ex, tc, opt, int(init_manifest.get("step", 0)), tlog)
    model.save(args.out, sc.optimizer, {"stage": "scst", "step": sc.schedule.step,
                                        "train_config": asdict(tc)})
    plot_training_log(tlog.rows, os.path.join(args.out, "train_curve.png"))
    write_manifest(args, [args.data, args.init], os.path.join(args.out, "run_manifest.json"))


def cmd_decode(args):
    paths = args.ensemble or ([args.checkpoint] if args.checkpoint else [])
    if not paths:
        raise UsageError("decode needs --checkpoint or --ensemble")
    models = [CaptionModel.load(p) for p in paths]
    ds = Dataset.load(args.data)
    emb = Embedder(models[0].config.txt_dim)
    examples = prepare_examples(ds, args.split, emb, _limits_from_model(models[0], args))
    captions = decode_examples(models, examples)
    out = [{"image_id": e.image_id, "caption": c} for e, c in zip(examples, captions)]
    if args.out not in (None, "-"):
        _claim(args.out, args.overwrite)
    _write_json(args.out, out)
    if args.out not in (None, "-"):
        write_manifest(args, [args.data] + paths, args.out + ".manifest.json")


def _load_references(args) -> dict:
    refs: dict = {}
    if args.references:
        for rec in _read_json_records(args.references):
            refs.setdefault(str(rec["image_id"]), []).append(rec["caption"])
    elif args.data:
        ds = Dataset.load(args.data)
        for r in ds.records:
            if args.split in (None, "all") or r.split == args.split:
                refs[r.image_id] = list(r.references)
    else:
        raise UsageError("evaluate needs --references or --data")
    return refs


def cmd_evaluate(args):
    cands = {str(r["image_id"]): r["caption"] for r in _read_json_records(args.captions)}
    refs = _load_references(args)
    try:
        report = metrics.evaluate(cands, refs, normalize)
    except KeyError as exc:
        raise ValidationError(str(exc)) from exc
    if args.out not in (None, "-"):
        _claim(args.out, args.overwrite)
    _write_json(args.out, report)
    if args.out not in (None, "-"):
        stem = os.path.splitext(args.out)[0]
        for p in (stem + ".tsv", stem + ".png"):
            _claim(p, args.overwrite)
        with open(stem + ".tsv", "w", encoding="utf-8") as fh:
            fh.write("image_id\tBLEU4\tROUGE_L\tCIDEr\tMETEOR_lite\n")
            for p in report["per_image"]:
                fh.write(f"{p['image_id']}\t{p['BLEU4']:.6f}\t{p['ROUGE_L']:.6f}\t"
                         f"{p['CIDEr']:.6f}\t{p['METEOR_lite']:.6f}\n")
        plot_metric_histogram(report, stem + ".png")
        write_manifest(args, [args.captions, args.references, args.data], args.out + ".manifest.json")
    summary = {k: report[k] for k in ("BLEU4", "ROUGE_L", "CIDEr", "METEOR_lite")}
    log.info("%s", json.dumps(summary))


def cmd_orient(args):
    lexicon = Lexicon.load(args.lexicon)
    limits = _limits(args)
    rows = []
    for item in read_detections(args.detections):
        if not item.rotations:
            continue
        angle, ranked = select_orientation(item.rotations, lexicon, limits)
        counts = {r.angle: intelligible_count(r.detections, lexicon, limits.count_instances)
                  for r in item.rotations}
        rows.append({"image_id": item.image_id, "angle": angle,
                     "tokens": [d.token for d in ranked], "intelligible": counts[angle]})
    text = "".join(json.dumps(r) + "\n" for r in rows)
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        _claim(args.out, args.overwrite)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        write_manifest(args, [args.detections, args.lexicon], args.out + ".manifest.json")


def cmd_rerank(args):
    sim = EmbeddingSimilarity(Embedder(args.txt_dim)) if args.similarity == "embedding" \
        else bow_cosine_similarity
    out = []
    for rec in _read_json_records(args.input):
        if "candidates" not in rec:
            raise ValidationError(f"record without candidates: {rec}")
        cset = CandidateSet(list(rec["candidates"]))
        k = rerank(cset, rec.get("ocr", []), sim, args.strategy)
        out.append({"image_id": rec.get("image_id"), "caption": cset.candidates[k]})
    if args.out not in (None, "-"):
        _claim(args.out, args.overwrite)
    _write_json(args.out, out)
    if args.out not in (None, "-"):
        write_manifest(args, [args.input], args.out + ".manifest.json")


def cmd_ablate(args):
    ds = Dataset.load(args.data)
    _claim_dir(args.out, args.overwrite)
    seeds = [int(s) for s in str(args.seeds).split(",") if s.strip()]
    mc = _model_config(args, ds)
    tc = _train_config(args)
    report = run_ablation(ds, mc, tc, seeds, Embedder(mc.txt_dim), _limits(args))
    with open(os.path.join(args.out, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    write_tsv(report, os.path.join(args.out, "ablation.tsv"))
    plot_ablation(report, os.path.join(args.out, "ablation.png"))
    with open(os.path.join(args.out, "ablation.tsv"), encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    write_manifest(args, [args.data], os.path.join(args.out, "run_manifest.json"))


# -- parser ------------------------------------------------------------------


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {v}")


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="key = value config file; flags override it")
    p.add_argument("--out", default=None)
    p.add_argument("--overwrite", action="store_true", help="allow replacing existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def _limit_flags(p):
    p.add_argument("--max-ocr", type=int, default=20)
    p.add_argument("--max-obj", type=int, default=10)
    p.add_argument("--obj-threshold", type=float, default=0.25)


def _model_flags(p):
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--txt-dim", type=int, default=32)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--copy", type=_bool, default=True)
    p.add_argument("--modalities", default="img,ocr,obj")


def _train_flags(p, ce_epochs=10, scst_epochs=10):
    p.add_argument("--ce-epochs", type=int, default=ce_epochs)
    p.add_argument("--scst-epochs", type=int, default=scst_epochs)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--scst-offset", type=int, default=2500)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vizcap", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _common(p)
    p.add_argument("--n-images", type=int, default=600)
    p.add_argument("--n-brands", type=int, default=20)
    p.add_argument("--text-fraction", type=float, default=0.7)
    p.add_argument("--rotation-fraction", type=float, default=0.285)
    p.add_argument("--oov-plant-fraction", type=float, default=0.3)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--n-refs", type=int, default=5)
    p.add_argument("--n-pixel", type=int, default=16)
    p.add_argument("--img-dim", type=int, default=32)
    p.add_argument("--confusion-rate", type=float, default=0.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-ce", help="cross-entropy training")
    _common(p)
    p.add_argument("--data", required=True)
    _model_flags(p)
    _limit_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train_ce)

    p = sub.add_parser("train-scst", help="self-critical fine-tuning from a CE checkpoint")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True, help="CE checkpoint directory")
    _limit_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train_scst)

    p = sub.add_parser("decode", help="caption a dataset split")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--ensemble", nargs="+")
    p.add_argument("--split", default="val")
    _limit_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="score captions against references")
    _common(p)
    p.add_argument("--captions", required=True)
    p.add_argument("--references")
    p.add_argument("--data")
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("orient", help="pick OCR rotations from detection files")
    _common(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--lexicon", required=True)
    _limit_flags(p)
    p.set_defaults(func=cmd_orient)

    p = sub.add_parser("rerank", help="choose one caption per image from candidates")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default="ocr-max-then-consensus")
    p.add_argument("--similarity", choices=("bow", "embedding"), default="embedding")
    p.add_argument("--txt-dim", type=int, default=32)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("ablate", help="IMG only / IMG+OCR / IMG+OBJ comparison")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="0,1,2")
    _model_flags(p)
    _limit_flags(p)
    _train_flags(p, ce_epochs=10, scst_epochs=5)
    p.set_defaults(func=cmd_ablate)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("missing subcommand")
    if args.config:
        if not os.path.isfile(args.config):
            raise ValidationError(f"config file {args.config} not found")
        cfg = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        types = {a.dest: a.type for a in sub._actions}
        defaults = {}
        for k, v in cfg.items():
            conv = types.get(k)
            try:
                defaults[k] = conv(v) if conv else v
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ValidationError(f"config key {k}: {exc}") from exc
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except ValidationError as exc:
        return _fail(EXIT_VALIDATION, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except (ValidationError, ValueError, KeyError, FileNotFoundError, VocabularyMismatch) as exc:
        return _fail(EXIT_VALIDATION, exc)
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_RUNTIME, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
