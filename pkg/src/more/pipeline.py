"""End-to-end desk experiment on the synthetic corpus: pretrain, evaluate, probe, explain."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import evaluate as E
from . import explain as X
from .config import RunConfig
from .dataset import build_tokenizer, gen_synthetic_triples
from .trainer import (
    finetune,
    make_batch,
    model_meta,
    predict,
    prepare,
    pretrain,
    save_checkpoint,
    split_subjects,
    write_log,
)

log = logging.getLogger(__name__)

N_HEATMAPS = 6


def split_dataset(subject_ids, cfg: RunConfig):
    """Subject-level ``(train, val, test)`` index arrays.

    The test side holds ``test_size / n`` of the subjects, validation a
    ``val_fraction`` of the remaining ones.
    """
    n = len(subject_ids)
    rest, test = split_subjects(subject_ids, cfg.data.test_size / n, cfg.data.seed)
    tr, va = split_subjects([subject_ids[i] for i in rest], cfg.data.val_fraction, cfg.data.seed + 1)
    return rest[tr], rest[va], test


def run_desk_experiment(cfg: RunConfig, out_dir, progress=None) -> Dict:
    """Run the whole pipeline and write ``pretrain.ckpt``, ``probe.ckpt``, ``train_log.jsonl``,
    ``metrics.tsv`` and ``heatmaps/`` under ``out_dir``. Returns the metrics as a dict."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    d = cfg.data
    ds = gen_synthetic_triples(d.classes, d.per_class, d.image_size, d.ecg_length, seed=d.seed)
    tr, va, te = split_dataset([s.subject_id for s in ds.samples], cfg)
    train_notes = [ds.samples[i].xray_note + " " + ds.samples[i].ecg_note for i in tr]
    tok = build_tokenizer(train_notes)
    data = prepare(ds.samples, tok, ds.classes)
    train, val, test = data.subset(tr), data.subset(va), data.subset(te)

    mcfg = cfg.model_config(len(tok))
    tcfg = cfg.train_config()
    records = []

    def on_epoch(rec):
        records.append(rec)
        if progress:
            progress(rec)

    res = pretrain(train, val, mcfg, tcfg, log_fn=on_epoch)
    model, mean, std = res.model, res.image_mean, res.image_std
    write_log(out / "train_log.jsonl", records)
    save_checkpoint(out / "pretrain.ckpt", model, model_meta(model, tok, mean, std, ds.classes, res.best_epoch), res.optimizer)

    # held-out embeddings
    imgs, ecgs, _, _ = make_batch(test, np.arange(len(test)), mean, std, None, 0, 0)
    zi, ze = E.embed_images(model, imgs), E.embed_ecgs(model, ecgs)
    zt = E.embed_texts(model, tok, [(ds.samples[i].xray_note, ds.samples[i].ecg_note) for i in te])
    y = test.labels
    bank = E.build_prompt_bank(model, tok, ds.classes, cfg.templates())
    s_img, s_ecg = E.zero_shot_classify(zi, bank), E.zero_shot_classify(ze, bank)
    rows = []
    metrics: Dict = {"zeroshot_image": {}, "zeroshot_ecg": {}, "zeroshot_fused": {}, "probe_image": {}}
    for name, s in (("zeroshot_image", s_img), ("zeroshot_ecg", s_ecg)):
        for c, v in E.per_class_auroc(s, y, ds.classes).items():
            metrics[name][c] = v
            rows.append((f"{name}_auroc", c, v))
    # fusion only applies to pairs inside the inference window
    gaps = np.array([ds.samples[i].gap_days for i in te])
    near = np.abs(gaps) <= cfg.eval.max_gap_days
    s_fused = E.fused_inference(s_img[near], s_ecg[near], cfg.eval.fusion_weight, gaps[near], cfg.eval.max_gap_days)
    metrics["fused_pairs"] = int(near.sum())
    for c, v in E.per_class_auroc(s_fused, y[near], ds.classes).items():
        metrics["zeroshot_fused"][c] = v
        rows.append(("zeroshot_fused_auroc", c, v))
    for name, s in (("image", s_img), ("ecg", s_ecg)):
        for c, v in E.per_class_auroc(s[near], y[near], ds.classes).items():
            metrics.setdefault(f"matched_{name}", {})[c] = v
            rows.append((f"zeroshot_matched_{name}_auroc", c, v))
    k = cfg.eval.top_k
    metrics["p_at_k_text_image"] = E.precision_at_k(zt, zi, y, y, k)
    metrics["p_at_k_text_ecg"] = E.precision_at_k(zt, ze, y, y, k)
    rows.append((f"prec@{k}_text_to_image", "all", metrics["p_at_k_text_image"]))
    rows.append((f"prec@{k}_text_to_ecg", "all", metrics["p_at_k_text_ecg"]))
    first = [r for r in records if r["split"] == "train"]
    metrics["loss_first"], metrics["loss_last"] = first[0]["loss"], first[-1]["loss"]
    rows.append(("train_loss_drop", "all", 1.0 - metrics["loss_last"] / metrics["loss_first"]))

    # explanations against the prompt of each sample's own class, before the probe touches the projector
    g, psz = model.image_encoder.embed.grid, model.cfg.vit.patch_size
    hits = []
    for j, i in enumerate(te):
        direction = bank.embeddings[ds.classes[y[j]]][0]
        rmap = X.explain_image(model, imgs[j], direction)
        hits.append(X.patch_overlaps(ds.motif_masks[i], X.hot_patch(rmap), psz))
        if j < N_HEATMAPS:
            X.write_heatmap_pgm(out / "heatmaps" / f"image_{int(i):04d}.pgm", X.render_image_heatmap(rmap, imgs[j].shape))
            emap = X.explain_ecg(model, ecgs[j], direction)
            X.write_ecg_relevance_tsv(out / "heatmaps" / f"ecg_{int(i):04d}.tsv", X.render_ecg_relevance(emap, ecgs.shape[-1]))
    metrics["motif_hit_rate"] = float(np.mean(hits))
    rows.append(("hot_patch_motif_overlap", "all", metrics["motif_hit_rate"]))

    # linear probe on the image branch (one-hot multilabel targets)
    train_imgs, _, _, _ = make_batch(train, np.arange(len(train)), mean, std, None, 0, 0)
    onehot = (train.labels[:, None] == np.arange(len(ds.classes))[None]).astype(np.float64)
    probe = finetune(model, train_imgs, onehot, tcfg, modality="image", task="multilabel", mode="linear_probe")
    p = predict(probe, imgs)
    for c, v in E.per_class_auroc(p, y, ds.classes).items():
        metrics["probe_image"][c] = v
        rows.append(("probe_image_auroc", c, v))
    save_checkpoint(
        out / "probe.ckpt", model, model_meta(model, tok, mean, std, ds.classes, res.best_epoch, {"finetune": "linear_probe"}),
        extra_tensors={f"classifier.{n}": v for n, v in probe.classifier.state_dict().items()},
    )
    E.write_metrics_tsv(out / "metrics.tsv", rows)
    metrics["runtime_s"] = time.perf_counter() - t0
    (out / "summary.json").write_text(json.dumps({k: v for k, v in metrics.items() if k != "runtime_s"}, indent=2, sort_keys=True) + "\n")
    return metrics
