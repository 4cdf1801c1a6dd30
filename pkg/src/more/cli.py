"""``more`` command-line entry point.

Exit codes: 0 success, 2 missing input file, 3 schema/format violation,
4 numeric failure (non-finite loss or gradient). Errors are written to
standard error as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import evaluate as E
from . import explain as X
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .dataset import build_tokenizer, gen_synthetic_triples, read_manifest, save_dataset, write_manifest
from .formats import FormatError, read_ecg, read_pgm, read_tsv, write_ecg, write_pgm, write_tsv
from .preprocess import EcgRecord, ImageRecord, preprocess_ecg, xray_adaptive_hist_eq

EXIT_MISSING, EXIT_SCHEMA, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def default_seed() -> int:
    return int(os.environ.get("MORE_SEED", "0"))


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, "missing_file", f"{p} does not exist")
    return p


# name -> (help, [(flag, kwargs)])
COMMANDS: Dict[str, Tuple[str, List[Tuple[str, dict]]]] = {
    "synth": ("generate a synthetic tri-modal corpus", [
        ("--classes", dict(type=int, required=True, help="number of classes")),
        ("--per-class", dict(type=int, required=True, help="triples per class")),
        ("--out", dict(required=True, help="output directory")),
        ("--seed", dict(type=int, default=None, help="random seed (falls back to MORE_SEED)")),
        ("--image-size", dict(type=int, default=64, help="image side in pixels")),
        ("--ecg-length", dict(type=int, default=1000, help="ECG length in samples at 100 Hz")),
    ]),
    "preprocess": ("equalise images and clean ECGs of a manifest", [
        ("--manifest", dict(required=True, help="input manifest.tsv")),
        ("--out", dict(required=True, help="output directory")),
    ]),
    "pretrain": ("contrastive pre-training", [
        ("--config", dict(required=True, help="run configuration file")),
        ("--out", dict(required=True, help="output checkpoint path")),
        ("--manifest", dict(default=None, help="raw training manifest (default: synthesise from the config)")),
        ("--seed", dict(type=int, default=None, help="overrides train.seed")),
    ]),
    "finetune": ("train a classifier head on a checkpoint", [
        ("--ckpt", dict(required=True, help="pre-trained checkpoint")),
        ("--manifest", dict(required=True, help="labelled raw manifest")),
        ("--mode", dict(choices=["linear_probe", "last_k_qkv"], default="linear_probe", help="which weights to train")),
        ("--k", dict(type=int, default=1, help="layers unfrozen by last_k_qkv")),
        ("--modality", dict(choices=["image", "ecg"], default="image", help="encoder branch")),
        ("--out", dict(required=True, help="output checkpoint path")),
        ("--config", dict(default=None, help="run configuration file for fine-tuning settings")),
        ("--seed", dict(type=int, default=None, help="random seed (falls back to MORE_SEED)")),
    ]),
    "zeroshot": ("score a manifest against class prompts", [
        ("--ckpt", dict(required=True, help="pre-trained checkpoint")),
        ("--manifest", dict(required=True, help="raw manifest to score")),
        ("--prompts", dict(required=True, help="TSV with columns class, prompt")),
        ("--modality", dict(choices=["image", "ecg"], default="image", help="encoder branch")),
        ("--out", dict(default=None, help="scores TSV (default: standard output)")),
    ]),
    "retrieve": ("rank a corpus against a text query", [
        ("--ckpt", dict(required=True, help="pre-trained checkpoint")),
        ("--query", dict(required=True, help="query text")),
        ("--corpus", dict(required=True, help="directory holding manifest.tsv")),
        ("--top-k", dict(type=int, default=5, help="results to return")),
        ("--modality", dict(choices=["image", "ecg"], default="image", help="corpus modality")),
        ("--out", dict(default=None, help="results TSV (default: standard output)")),
    ]),
    "explain": ("relevance map for one image (.pgm) or ECG (.ecg)", [
        ("--ckpt", dict(required=True, help="pre-trained checkpoint")),
        ("--input", dict(required=True, help="raw .pgm image or .ecg record")),
        ("--class", dict(dest="class_name", required=True, help="class whose prompt is explained")),
        ("--out", dict(required=True, help="output .pgm heatmap or .tsv relevance trace")),
    ]),
    "eval": ("compute a metric from score and label files", [
        ("--scores", dict(required=True, help="TSV id, score (auroc/auprc) or a similarity matrix (prec@k)")),
        ("--labels", dict(required=True, help="TSV id, label")),
        ("--metric", dict(choices=["auroc", "auprc", "prec@k"], required=True, help="metric")),
        ("--k", dict(type=int, default=5, help="k for prec@k")),
    ]),
    "desk": ("run the full synthetic experiment", [
        ("--config", dict(default=None, help="run configuration file (default: built-in defaults)")),
        ("--out", dict(required=True, help="output directory")),
    ]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="more", description="Tri-modal contrastive pre-training toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, flags) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        for flag, kwargs in flags:
            p.add_argument(flag, **kwargs)
    return parser


# -- helpers ------------------------------------------------------------------------------
def _load_ckpt(path):
    from .trainer import load_checkpoint

    return load_checkpoint(_need(path))


def _normalised_images(samples, meta) -> np.ndarray:
    imgs = np.stack([xray_adaptive_hist_eq(s.image).pixels for s in samples])
    return (imgs - meta["image_mean"]) / meta["image_std"]


def _ecgs(samples) -> np.ndarray:
    return np.stack([preprocess_ecg(s.ecg).leads for s in samples])


def _embed_samples(model, samples, meta, modality) -> np.ndarray:
    if modality == "image":
        return E.embed_images(model, _normalised_images(samples, meta))
    return E.embed_ecgs(model, _ecgs(samples))


def _manifest(path, payloads=True):
    return read_manifest(_need(path), load_payloads=payloads)


def _class_of(sample) -> str:
    on = [k for k, v in sample.labels.items() if v == 1]
    return on[0] if len(on) == 1 else ""


# -- commands ---------------------------------------------------------------------------------
def cmd_synth(a) -> int:
    seed = a.seed if a.seed is not None else default_seed()
    ds = gen_synthetic_triples(a.classes, a.per_class, a.image_size, a.ecg_length, seed=seed)
    path = save_dataset(a.out, ds.samples)
    print(path)
    return 0


def cmd_preprocess(a) -> int:
    samples = _manifest(a.manifest)
    out = Path(a.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "ecg").mkdir(parents=True, exist_ok=True)
    done = []
    for i, s in enumerate(samples):
        ip, ep = f"images/{i:06d}.pgm", f"ecg/{i:06d}.ecg"
        write_pgm(out / ip, xray_adaptive_hist_eq(s.image).pixels)
        write_ecg(out / ep, preprocess_ecg(s.ecg))
        s.image_path, s.ecg_path = ip, ep
        done.append(s)
    write_manifest(out / "manifest.tsv", done)
    print(out / "manifest.tsv")
    return 0


def _run_config(path) -> RunConfig:
    return RunConfig.load(_need(path)) if path else RunConfig()


def cmd_pretrain(a) -> int:
    from .trainer import model_meta, prepare, pretrain, save_checkpoint, split_subjects, write_log

    cfg = _run_config(a.config)
    if a.seed is not None:
        cfg.train.seed = a.seed
    elif "MORE_SEED" in os.environ:
        cfg.train.seed = default_seed()
    if a.manifest:
        samples = _manifest(a.manifest)
        classes = list(samples[0].labels) if samples[0].labels else []
    else:
        d = cfg.data
        ds = gen_synthetic_triples(d.classes, d.per_class, d.image_size, d.ecg_length, seed=d.seed)
        samples, classes = ds.samples, ds.classes
    tr, va = split_subjects([s.subject_id for s in samples], cfg.data.val_fraction, cfg.train.seed)
    tok = build_tokenizer(samples[i].xray_note + " " + samples[i].ecg_note for i in tr)
    data = prepare(samples, tok, classes)
    records: list = []
    res = pretrain(data.subset(tr), data.subset(va) if len(va) else None, cfg.model_config(len(tok)), cfg.train_config(), log_fn=records.append)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, res.model, model_meta(res.model, tok, res.image_mean, res.image_std, classes, res.best_epoch), res.optimizer)
    write_log(out.with_suffix(".log.jsonl"), records)
    print(out)
    return 0


def cmd_finetune(a) -> int:
    from .trainer import finetune, model_meta, save_checkpoint

    model, tok, meta, _ = _load_ckpt(a.ckpt)
    cfg = _run_config(a.config)
    tcfg = cfg.train_config()
    tcfg.seed = a.seed if a.seed is not None else default_seed()
    tcfg.k_last_layers = a.k
    samples = _manifest(a.manifest)
    classes = meta["classes"] or list(samples[0].labels)
    y = np.array([[1.0 if s.labels.get(c, 0) == 1 else 0.0 for c in classes] for s in samples])
    x = _normalised_images(samples, meta) if a.modality == "image" else _ecgs(samples)
    res = finetune(model, x, y, tcfg, modality=a.modality, task="multilabel", mode=a.mode)
    extra = {"finetune": a.mode, "finetune_modality": a.modality, "k_last_layers": a.k}
    save_checkpoint(
        a.out, model, model_meta(model, tok, meta["image_mean"], meta["image_std"], classes, meta["epoch"], extra),
        extra_tensors={f"classifier.{n}": v for n, v in res.classifier.state_dict().items()},
    )
    print(a.out)
    return 0


def _read_prompts(path) -> Dict[str, List[str]]:
    header, rows = read_tsv(_need(path))
    if header[:2] != ["class", "prompt"]:
        raise CliError(EXIT_SCHEMA, "schema", "prompts file needs columns class, prompt")
    out: Dict[str, List[str]] = {}
    for r in rows:
        out.setdefault(r["class"], []).append(r["prompt"])
    return out


def cmd_zeroshot(a) -> int:
    model, tok, meta, _ = _load_ckpt(a.ckpt)
    prompts = _read_prompts(a.prompts)
    samples = _manifest(a.manifest)
    classes = list(prompts)
    flat = [(p, "") for c in classes for p in prompts[c]]
    emb = E.embed_texts(model, tok, flat)
    bank, i = {}, 0
    for c in classes:
        bank[c] = emb[i : i + len(prompts[c])]
        i += len(prompts[c])
    scores = E.zero_shot_classify(_embed_samples(model, samples, meta, a.modality), E.PromptBank(classes, prompts, bank))
    rows = [(s.study_id_x if a.modality == "image" else s.study_id_e, *map(float, sc)) for s, sc in zip(samples, scores)]
    header = ["id"] + classes
    if a.out:
        write_tsv(a.out, header, rows)
    else:
        print("\t".join(header))
        for r in rows:
            print("\t".join(str(v) for v in r))
    return 0


def cmd_retrieve(a) -> int:
    model, tok, meta, _ = _load_ckpt(a.ckpt)
    samples = _manifest(Path(a.corpus) / "manifest.tsv")
    corpus = _embed_samples(model, samples, meta, a.modality)
    q = E.embed_texts(model, tok, [(a.query, "")])
    ids = [s.study_id_x if a.modality == "image" else s.study_id_e for s in samples]
    label_of = dict(zip(ids, (_class_of(s) for s in samples)))
    words = set(a.query.lower().split())
    target = next((c for c in meta["classes"] if c.lower() in a.query.lower() or c.lower() in words), "")
    rows = [("query", r + 1, cid, sim, bool(target) and label_of[cid] == target) for r, (cid, sim) in enumerate(E.retrieve(q, corpus, a.top_k, ids))]
    if a.out:
        E.write_retrieval_tsv(a.out, rows)
    else:
        print("query_id\trank\tcorpus_id\tsimilarity\tlabel_match")
        for q_id, rank, cid, sim, m in rows:
            print(f"{q_id}\t{rank}\t{cid}\t{sim!r}\t{int(m)}")
    return 0


def cmd_explain(a) -> int:
    model, tok, meta, _ = _load_ckpt(a.ckpt)
    src = _need(a.input)
    direction = E.embed_texts(model, tok, [(f"Finding of {a.class_name}", "")])[0]
    if src.suffix == ".pgm":
        img = xray_adaptive_hist_eq(ImageRecord(read_pgm(src))).pixels
        img = (img - meta["image_mean"]) / meta["image_std"]
        rmap = X.explain_image(model, img, direction)
        X.write_heatmap_pgm(a.out, X.render_image_heatmap(rmap, img.shape))
    elif src.suffix == ".ecg":
        sig = preprocess_ecg(read_ecg(src)).leads
        rmap = X.explain_ecg(model, sig, direction)
        X.write_ecg_relevance_tsv(a.out, X.render_ecg_relevance(rmap, sig.shape[-1]))
    else:
        raise CliError(EXIT_SCHEMA, "schema", "input must be a .pgm image or an .ecg record")
    print(a.out)
    return 0


def _column(rows, name, path):
    try:
        return [r[name] for r in rows]
    except KeyError:
        raise CliError(EXIT_SCHEMA, "schema", f"{path} lacks column {name!r}") from None


def cmd_eval(a) -> int:
    sh, srows = read_tsv(_need(a.scores))
    lh, lrows = read_tsv(_need(a.labels))
    labels = dict(zip(_column(lrows, "id", a.labels), _column(lrows, "label", a.labels)))
    try:
        if a.metric == "prec@k":
            corpus_ids = sh[1:]
            sim = np.array([[float(r[c]) for c in corpus_ids] for r in srows])
            q_ids = [r[sh[0]] for r in srows]
            value = E.precision_at_k_from_similarity(sim, [labels[q] for q in q_ids], [labels[c] for c in corpus_ids], a.k)
        else:
            ids = _column(srows, "id", a.scores)
            scores = np.array([float(v) for v in _column(srows, "score", a.scores)])
            y = np.array([int(labels[i]) for i in ids])
            value = (E.auroc if a.metric == "auroc" else E.auprc)(scores, y)
    except KeyError as exc:
        raise CliError(EXIT_SCHEMA, "schema", f"id {exc} has no label") from None
    except E.MetricError as exc:
        raise CliError(EXIT_SCHEMA, "undefined_metric", str(exc)) from None
    print(f"{a.metric}\t{value!r}")
    return 0


def cmd_desk(a) -> int:
    from .pipeline import run_desk_experiment

    cfg = _run_config(a.config)
    if "MORE_SEED" in os.environ and not a.config:
        cfg.train.seed = default_seed()
    m = run_desk_experiment(cfg, a.out, progress=lambda r: print(json.dumps(r, sort_keys=True), file=sys.stderr))
    print(json.dumps({k: v for k, v in m.items() if k != "runtime_s"}, sort_keys=True))
    return 0


HANDLERS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "zeroshot": cmd_zeroshot, "retrieve": cmd_retrieve, "explain": cmd_explain, "eval": cmd_eval, "desk": cmd_desk,
}


def main(argv: Sequence[str] = None) -> int:
    from .trainer import NonFiniteError

    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except CliError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except FileNotFoundError as exc:
        code, kind, msg = EXIT_MISSING, "missing_file", str(exc)
    except (ConfigError, FormatError, CheckpointError) as exc:
        code, kind, msg = EXIT_SCHEMA, "schema", str(exc)
    except (NonFiniteError, FloatingPointError) as exc:
        code, kind, msg = EXIT_NUMERIC, "numeric", str(exc)
    except ValueError as exc:
        # invalid settings caught by the library's own validation
        code, kind, msg = EXIT_SCHEMA, "schema", str(exc)
    print(json.dumps({"error": kind, "message": msg, "command": args.command}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
