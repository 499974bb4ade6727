"""Modality ablation: IMG only, IMG+OCR and IMG+OBJ caption models.

Each row trains one non-copy model per seed (CE then SCST), reports the
per-seed single-model CIDEr and scores the seed ensemble before and after
post-processing (OCR-overlap rerank with self-consensus tie-break over the
ensemble caption and the single-model captions).
"""

from __future__ import annotations

import csv
from dataclasses import replace

import numpy as np

from . import metrics
from .data import Dataset, prepare_examples
from .embeddings import Embedder
from .model import ModelConfig
from .perception import ChannelLimits
from .postprocess import CandidateSet, EmbeddingSimilarity, rerank
from .training import TrainConfig, decode_examples, run_pipeline

ROWS = (
    ("IMG only", False, False),
    ("IMG+OCR", True, False),
    ("IMG+OBJ", False, True),
)
METRICS = ("BLEU4", "METEOR_lite", "ROUGE_L", "CIDEr")


def _scores(captions, examples) -> dict:
    cands = [c.split() for c in captions]
    refs = [e.references for e in examples]
    return {
        "BLEU4": 100 * metrics.corpus_bleu4(cands, refs),
        "METEOR_lite": 100 * float(np.mean([metrics.meteor_lite(c, r) for c, r in zip(cands, refs)])),
        "ROUGE_L": 100 * float(np.mean([metrics.rouge_l(c, r) for c, r in zip(cands, refs)])),
        "CIDEr": 100 * metrics.cider(cands, refs)[0],
    }


def run_ablation(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
                 seeds=(0, 1, 2), embedder: Embedder | None = None,
                 limits: ChannelLimits = ChannelLimits(), rows=ROWS) -> dict:
    embedder = embedder or Embedder(model_config.txt_dim)
    val = prepare_examples(dataset, "val", embedder, limits)
    sim = EmbeddingSimilarity(embedder)
    if not val:
        raise ValueError("ablation needs a non-empty val split")
    out_rows = []
    for label, use_ocr, use_obj in rows:
        mc = replace(model_config, use_ocr=use_ocr, use_obj=use_obj, copy_enabled=False)
        results = run_pipeline(dataset, mc, train_config, embedder, limits,
                               variations={"seed": list(seeds)})
        models = [r["model"] for r in results]
        per_model = [decode_examples(m, val) for m in models]
        singles = [_scores(caps, val) for caps in per_model]
        ens = decode_examples(models, val)
        post = []
        for k, e in enumerate(val):
            cset = CandidateSet([ens[k]] + [caps[k] for caps in per_model],
                                ["ensemble"] + [f"seed{s}" for s in seeds])
            post.append(cset.candidates[rerank(cset, e.bundle.ocr_tokens, sim)])
        single_cider = [s["CIDEr"] for s in singles]
        out_rows.append({
            "label": label,
            "use_ocr": use_ocr,
            "use_obj": use_obj,
            "seeds": list(seeds),
            "single_cider": single_cider,
            "single_cider_median": float(np.median(single_cider)),
            "before": _scores(ens, val),
            "after": _scores(post, val),
        })
    return {"metrics": list(METRICS), "rows": out_rows, "n_val": len(val),
            "ensemble_size": len(seeds), "scale": "x100"}


def write_tsv(report: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["model"] + [f"{m} (before / after)" for m in report["metrics"]]
                   + ["CIDEr single (median)"])
        for row in report["rows"]:
            w.writerow([row["label"]]
                       + [f"{row['before'][m]:.2f} / {row['after'][m]:.2f}" for m in report["metrics"]]
                       + [f"{row['single_cider_median']:.2f}"])
