"""Command-line interface.

Exit codes: 0 on success, 1 with a one-line `error: ...` message on any
validation or runtime failure, 2 for usage mistakes (argparse's default).
Config values resolve as defaults < --config file < explicit flags, and the
resolved document is echoed into the output directory before training.
"""

import argparse
import json
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .config import LABELS, resolve_config
from .data import (SyntheticSpec, encode_manifest, featurize_manifest,
                   gen_synthetic, parse_manifest)
from .errors import MelformerError, ValidationError
from .fusion import check_coverage, load_utterance_embeddings, restore_fusion_model
from .harness import evaluate, kfold_split, run_protocol, write_results, write_table
from .model import load_checkpoint, restore_model
from .text import Lexicon, hash_word_vectors, load_word_vectors, tokenize_and_g2p

_MODEL_KEYS = ("d_model", "heads", "layers_text", "layers_cross", "layers_fusion",
               "d_ff", "dropout", "combine_mode", "num_classes", "finetune_word_vectors")
_HARNESS_KEYS = ("lr", "batch_size", "max_epochs", "patience", "clip_norm",
                 "seeds", "workers", "group_mode", "granularity", "freeze_fine")
_PATH_KEYS = ("manifest", "lexicon", "word_vectors", "utt_embeddings", "out_dir")


def _seeds(value):
    try:
        return tuple(int(v) for v in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


def _layers_spec(value):
    name, _, csv = value.partition("=")
    if name not in ("text", "cross", "fusion") or not csv:
        raise argparse.ArgumentTypeError(
            f"expected text=..., cross=..., or fusion=... with comma-separated counts, got {value!r}")
    try:
        return name, tuple(int(v) for v in csv.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer count in {value!r}")


def _add_run_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--manifest")
    p.add_argument("--lexicon")
    p.add_argument("--word-vectors", dest="word_vectors")
    p.add_argument("--utt-embeddings", dest="utt_embeddings")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--layers-text", dest="layers_text", type=int)
    p.add_argument("--layers-cross", dest="layers_cross", type=int)
    p.add_argument("--layers-fusion", dest="layers_fusion", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--combine-mode", dest="combine_mode", choices=("concat", "highway"))
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--finetune-word-vectors", dest="finetune_word_vectors",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--seeds", type=_seeds, help="comma-separated, e.g. 0,1,2")
    p.add_argument("--workers", type=int)
    p.add_argument("--group-mode", dest="group_mode", choices=("auto", "session", "random"))
    p.add_argument("--granularity", choices=("fine", "multi"))
    p.add_argument("--freeze-fine", dest="freeze_fine",
                   action=argparse.BooleanOptionalAction, default=None)


def _flags_to_dict(args):
    flags = {"model": {}, "harness": {}}
    for key in _MODEL_KEYS:
        if getattr(args, key, None) is not None:
            flags["model"][key] = getattr(args, key)
    for key in _HARNESS_KEYS:
        if getattr(args, key, None) is not None:
            flags["harness"][key] = getattr(args, key)
    for key in _PATH_KEYS:
        if getattr(args, key, None) is not None:
            flags[key] = getattr(args, key)
    return flags


def _resolve_from_args(args):
    file_dict = None
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ValidationError(f"config not found: {path}")
        try:
            file_dict = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: bad JSON ({exc.msg})") from None
    return resolve_config(file_dict, _flags_to_dict(args))


def _load_manifest(path):
    if not path:
        raise ValidationError("no manifest given; pass --manifest or set it in the config")
    if not Path(path).exists():
        raise ValidationError(f"manifest not found: {path}")
    return parse_manifest(path)


def _load_lexicon(path):
    if not path:
        return Lexicon({})
    if not Path(path).exists():
        raise ValidationError(f"lexicon not found: {path}")
    return Lexicon.load(path)


def _word_vectors_for(run_cfg, manifest, lexicon):
    if run_cfg.word_vectors:
        if not Path(run_cfg.word_vectors).exists():
            raise ValidationError(f"word vectors not found: {run_cfg.word_vectors}")
        wv = load_word_vectors(run_cfg.word_vectors)
        if wv.dim != run_cfg.model.word_dim:
            raise ValidationError(
                f"word vectors are {wv.dim}-dimensional but the model expects "
                f"word_dim={run_cfg.model.word_dim}")
        return wv
    vocab = sorted({w for r in manifest.records
                    for w in tokenize_and_g2p(r.transcript, lexicon).words})
    return hash_word_vectors(vocab, dim=run_cfg.model.word_dim)


def _load_resources(run_cfg):
    manifest = _load_manifest(run_cfg.manifest)
    lexicon = _load_lexicon(run_cfg.lexicon)
    wv = _word_vectors_for(run_cfg, manifest, lexicon)
    utt_table = utt_dim = None
    if run_cfg.harness.granularity == "multi" and run_cfg.utt_embeddings:
        if not Path(run_cfg.utt_embeddings).exists():
            raise ValidationError(f"utterance embeddings not found: {run_cfg.utt_embeddings}")
        utt_dim, utt_table = load_utterance_embeddings(run_cfg.utt_embeddings)
        check_coverage(utt_table, [r.utt_embedding_id or r.id for r in manifest.records])
    return manifest, lexicon, wv, utt_table, utt_dim


def _run_resolved(run_cfg, quiet=False):
    out = Path(run_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(run_cfg.to_json() + "\n")
    manifest, lexicon, wv, utt_table, utt_dim = _load_resources(run_cfg)
    encs = encode_manifest(manifest, lexicon, wv, utt_table=utt_table)
    plans = kfold_split(manifest, seed=run_cfg.harness.seeds[0],
                        group_mode=run_cfg.harness.group_mode)
    results, summary = run_protocol(encs, plans, run_cfg.model, run_cfg.harness,
                                    wv, utt_dim=utt_dim, out_dir=str(out))
    write_results(out, run_cfg, results, summary)
    if not quiet:
        print(f"run {run_cfg.run_id()} -> {out / 'results.json'}")
        print(f"WA {summary['wa']}")
        print(f"UA {summary['ua']}")
    return summary


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_synthetic(args):
    spec = SyntheticSpec(classes=args.classes, per_class=args.per_class,
                         seed=args.seed, utt_dim=args.utt_dim)
    manifest_path = gen_synthetic(spec, args.out)
    print(f"wrote {spec.classes * spec.per_class} utterances, manifest at {manifest_path}")
    return 0


def cmd_featurize(args):
    manifest = _load_manifest(args.manifest)
    new_manifest, written, skipped = featurize_manifest(manifest, args.out_dir)
    print(f"features written: {written}, unchanged: {skipped}")
    print(f"manifest: {new_manifest}")
    return 0


def cmd_train(args):
    _run_resolved(_resolve_from_args(args))
    return 0


def cmd_sweep(args):
    import copy
    base = _resolve_from_args(args)
    grid = dict(args.layers or [])
    axes = [("layers_text", grid.get("text", (base.model.layers_text,))),
            ("layers_cross", grid.get("cross", (base.model.layers_cross,))),
            ("layers_fusion", grid.get("fusion", (base.model.layers_fusion,)))]
    out = Path(base.out_dir)
    rows, doc = [], []
    for lt in axes[0][1]:
        for lc in axes[1][1]:
            for lf in axes[2][1]:
                cfg = copy.deepcopy(base)
                cfg.model.layers_text = lt
                cfg.model.layers_cross = lc
                cfg.model.layers_fusion = lf
                cfg.out_dir = str(out / f"text{lt}-cross{lc}-fusion{lf}")
                summary = _run_resolved(cfg, quiet=True)
                name = f"text={lt} cross={lc} fusion={lf}"
                rows.append((name, summary["wa"], summary["ua"]))
                doc.append({"layers": {"text": lt, "cross": lc, "fusion": lf},
                            "run_id": cfg.run_id(), "summary": summary})
                print(f"{name}  WA {summary['wa']}  UA {summary['ua']}")
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "table.txt", rows)
    (out / "sweep.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"sweep table -> {out / 'table.txt'}")
    return 0


def _restore_any(path, word_vectors):
    if not Path(path).exists():
        raise ValidationError(f"checkpoint not found: {path}")
    _, extra, _ = load_checkpoint(path)
    if extra.get("granularity") == "multi":
        return restore_fusion_model(path, word_vectors)
    return restore_model(path, word_vectors)


def _eval_word_vectors(args, manifest, lexicon, word_dim):
    if args.word_vectors:
        return load_word_vectors(args.word_vectors)
    vocab = sorted({w for r in manifest.records
                    for w in tokenize_and_g2p(r.transcript, lexicon).words})
    return hash_word_vectors(vocab, dim=word_dim)


def cmd_eval(args):
    if not Path(args.checkpoint).exists():
        raise ValidationError(f"checkpoint not found: {args.checkpoint}")
    cfg, extra, _ = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    lexicon = _load_lexicon(args.lexicon)
    wv = _eval_word_vectors(args, manifest, lexicon, cfg.word_dim)
    model, cfg, extra = _restore_any(args.checkpoint, wv)
    utt_table = None
    if extra.get("granularity") == "multi" and args.utt_embeddings:
        _, utt_table = load_utterance_embeddings(args.utt_embeddings)
        check_coverage(utt_table, [r.utt_embedding_id or r.id for r in manifest.records])
    encs = encode_manifest(manifest, lexicon, wv, utt_table=utt_table)
    m = evaluate(model, encs)
    print(f"WA {m.wa:.4f}")
    print(f"UA {m.ua:.4f}")
    for label, recall in zip(LABELS, m.per_class_recall):
        shown = "n/a" if recall is None else f"{recall:.4f}"
        print(f"recall[{label}] {shown}")
    print("confusion (rows true, cols predicted):")
    for row in m.confusion:
        print("  " + " ".join(f"{v:5d}" for v in row))
    return 0


def cmd_predict(args):
    from .audio import featurize_wav
    if not Path(args.checkpoint).exists():
        raise ValidationError(f"checkpoint not found: {args.checkpoint}")
    if not Path(args.wav).exists():
        raise ValidationError(f"wav not found: {args.wav}")
    lexicon = _load_lexicon(args.lexicon)
    seq = tokenize_and_g2p(args.transcript, lexicon)
    if args.word_vectors:
        wv = load_word_vectors(args.word_vectors)
    else:
        wv = hash_word_vectors(seq.words, dim=load_checkpoint(args.checkpoint)[0].word_dim)
    model, cfg, extra = _restore_any(args.checkpoint, wv)
    emb = None
    if extra.get("granularity") == "multi" and args.utt_embeddings:
        if not args.utt_id:
            raise ValidationError("--utt-id is required with --utt-embeddings")
        _, table = load_utterance_embeddings(args.utt_embeddings)
        check_coverage(table, [args.utt_id])
        emb = table[args.utt_id]
    mel = featurize_wav(args.wav)
    enc = SimpleNamespace(word_ids=[wv.lookup(w) for w in seq.words],
                          phonemes=seq.phonemes, mel=mel.frames, utt_embedding=emb)
    probs = model.predict_probs(enc)
    for label, p in zip(LABELS, probs):
        print(f"{label} {p:.4f}")
    print(f"predicted: {LABELS[int(np.argmax(probs))]}")
    return 0


def cmd_gradcheck(args):
    from .verify import run_all
    results = run_all(report=print)
    return 0 if all(ok for _, _, ok in results) else 1


def build_parser():
    ap = argparse.ArgumentParser(
        prog="melformer",
        description="Multimodal speech emotion recognition: feature extraction, "
                    "training protocol, and inference.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a small separable synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", dest="per_class", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--utt-dim", dest="utt_dim", type=int, default=32)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("featurize", help="cache feature matrices for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="run the 5-fold protocol over all seeds")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid over layer counts, one protocol run each")
    _add_run_flags(p)
    p.add_argument("--layers", type=_layers_spec, nargs="+",
                   help="axes like: text=1,2,3 cross=1,2 fusion=2")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--word-vectors", dest="word_vectors")
    p.add_argument("--utt-embeddings", dest="utt_embeddings")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one wav file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--transcript", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--word-vectors", dest="word_vectors")
    p.add_argument("--utt-embeddings", dest="utt_embeddings")
    p.add_argument("--utt-id", dest="utt_id")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and both models")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MelformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
