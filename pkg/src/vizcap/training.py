"""Cross-entropy pre-training and self-critical sequence training."""

from __future__ import annotations

import itertools
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics
from .data import Dataset, Example, caption_targets, prepare_examples
from .embeddings import Embedder
from .model import (Batch, CaptionModel, ModelConfig, ensemble_decode, greedy_decode, make_batch,
                    sample_decode)
from .optim import Adam, OptimizerConfig, ScheduleState, clip_grad_norm
from .perception import ChannelLimits
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

REWARDS = ("CIDEr", "BLEU4", "ROUGE_L", "METEOR_lite")


@dataclass
class TrainConfig:
    ce_epochs: int = 10
    batch_size: int = 16
    scst_epochs: int = 10
    seed: int = 0
    reward: str = "CIDEr"
    base_lr: float = 1e-3
    warmup_steps: int = 100
    # None keeps the full-scale 50k restart offset; desk runs pass a smaller value.
    scst_offset: int | None = None
    scst_base_lr: float | None = None
    clip_norm: float = 1.0
    # "last": start SCST from the last CE epoch; "random": any epoch in the final third.
    scst_init: str = "last"

    def __post_init__(self):
        if self.ce_epochs < 0 or self.scst_epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.reward not in REWARDS:
            raise ValueError(f"reward must be one of {REWARDS}")


@dataclass
class ScstBatchOutcome:
    sampled: list
    baseline: list
    r_sample: np.ndarray
    r_baseline: np.ndarray
    advantage: np.ndarray = field(init=False)
    loss: float = 0.0
    lr: float = 0.0

    def __post_init__(self):
        self.advantage = self.r_sample - self.r_baseline
        if not np.isfinite(self.advantage).all():
            raise NonFiniteError("non-finite SCST advantage")


class TrainLog:
    """JSON-lines step log; a no-op without a path."""

    def __init__(self, path=None):
        self.path = path
        self.rows = []

    def write(self, **row) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")


# -- CE --------------------------------------------------------------------


def teacher_forcing_arrays(model: CaptionModel, batch: Batch, captions) -> tuple[np.ndarray, np.ndarray]:
    """``(inputs, targets)`` with BOS-shifted inputs; targets padded with the pad id."""
    c = model.config
    vocab = model.vocab
    seqs = [caption_targets(words, dyn, c.copy_enabled, c.max_decode_len)
            for words, dyn in zip(captions, batch.dyns)]
    return ids_to_arrays(seqs, vocab)


def ids_to_arrays(seqs, vocab) -> tuple[np.ndarray, np.ndarray]:
    Tn = max(len(s) for s in seqs)
    targets = np.full((len(seqs), Tn), vocab.pad_id, dtype=np.int64)
    inputs = np.full((len(seqs), Tn), vocab.pad_id, dtype=np.int64)
    for b, s in enumerate(seqs):
        targets[b, :len(s)] = s
        inputs[b, 0] = vocab.bos_id
        inputs[b, 1:len(s)] = s[:-1]
    return inputs, targets


def ce_loss(model: CaptionModel, batch: Batch, captions, rng=None):
    """Mean negative log-likelihood per target token (a scalar tensor)."""
    inputs, targets = teacher_forcing_arrays(model, batch, captions)
    logp = model.sequence_log_probs(batch, inputs, targets, rng)
    real = (targets != model.vocab.pad_id).astype(model.dtype)
    return -(logp * real).sum() * (1.0 / real.sum())


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def ce_epoch(model: CaptionModel, examples: list[Example], optimizer: Adam, schedule: ScheduleState,
             rng: np.random.Generator, batch_size: int, clip_norm: float = 0.0,
             train_log: TrainLog | None = None) -> float:
    """One pass over every (image, reference) pair; returns the mean batch loss."""
    pairs = [(e, k) for e in examples for k in range(len(e.references))]
    order = rng.permutation(len(pairs))
    losses = []
    for chunk in _batches([pairs[i] for i in order], batch_size):
        batch = make_batch([e.bundle for e, _ in chunk], model.vocab, model.config)
        loss = ce_loss(model, batch, [e.references[k] for e, k in chunk], rng)
        optimizer.zero_grad()
        loss.backward()
        if clip_norm:
            clip_grad_norm(model.params, clip_norm)
        lr = optimizer.step(schedule)
        losses.append(loss.item())
        if train_log is not None:
            train_log.write(stage="ce", step=schedule.step, effective_step=schedule.effective,
                            lr=lr, loss=losses[-1])
    return float(np.mean(losses)) if losses else 0.0


# -- SCST ------------------------------------------------------------------


def caption_reward(kind: str, hyps, examples: list[Example], idf: metrics.CorpusIDF | None) -> np.ndarray:
    out = []
    for h, e in zip(hyps, examples):
        cand = h.surface.split()
        if kind == "CIDEr":
            out.append(metrics.cider_d_single(cand, e.references, idf))
        elif kind == "BLEU4":
            out.append(metrics.bleu4(cand, e.references))
        elif kind == "ROUGE_L":
            out.append(metrics.rouge_l(cand, e.references))
        else:
            out.append(metrics.meteor_lite(cand, e.references))
    return np.array(out, dtype=np.float64)


def scst_loss(model: CaptionModel, batch: Batch, sampled_ids, advantage: np.ndarray):
    """-mean_b advantage_b * sum_t log p(sampled token_t); rewards are constants."""
    inputs, targets = ids_to_arrays([ids if ids else [model.vocab.eos_id] for ids in sampled_ids],
                                    model.vocab)
    logp = model.sequence_log_probs(batch, inputs, targets, rng=None)
    real = (targets != model.vocab.pad_id).astype(model.dtype)
    weights = (advantage[:, None] * real).astype(model.dtype)
    return -(logp * weights).sum() * (1.0 / len(sampled_ids))


def scst_step(model: CaptionModel, examples: list[Example], optimizer: Adam, schedule: ScheduleState,
              idf: metrics.CorpusIDF | None, sample_seed: int, reward: str = "CIDEr",
              clip_norm: float = 0.0) -> ScstBatchOutcome:
    batch = make_batch([e.bundle for e in examples], model.vocab, model.config)
    baseline = greedy_decode(model, batch)
    sampled = sample_decode(model, batch, rng_seed=sample_seed)
    outcome = ScstBatchOutcome(sampled, baseline,
                               caption_reward(reward, sampled, examples, idf),
                               caption_reward(reward, baseline, examples, idf))
    loss = scst_loss(model, batch, [h.token_ids for h in sampled], outcome.advantage)
    optimizer.zero_grad()
    if loss.requires_grad:
        loss.backward()
    if clip_norm:
        clip_grad_norm(model.params, clip_norm)
    outcome.lr = optimizer.step(schedule)
    outcome.loss = loss.item()
    return outcome


def scst_epoch(model, examples, optimizer, schedule, idf, rng, batch_size, reward="CIDEr",
               clip_norm=0.0, train_log: TrainLog | None = None) -> float:
    order = rng.permutation(len(examples))
    rewards = []
    for chunk in _batches([examples[i] for i in order], batch_size):
        out = scst_step(model, chunk, optimizer, schedule, idf, int(rng.integers(1 << 31)),
                        reward, clip_norm)
        rewards.append(float(out.r_sample.mean()))
        if train_log is not None:
            train_log.write(stage="scst", step=schedule.step, effective_step=schedule.effective,
                            lr=out.lr, mean_advantage=float(out.advantage.mean()),
                            reward_mean=rewards[-1], baseline_mean=float(out.r_baseline.mean()))
    return float(np.mean(rewards)) if rewards else 0.0


# -- evaluation ------------------------------------------------------------


def decode_examples(models, examples: list[Example], batch_size: int = 64) -> list[str]:
    models = models if isinstance(models, (list, tuple)) else [models]
    out = []
    for chunk in _batches(examples, batch_size):
        batch = make_batch([e.bundle for e in chunk], models[0].vocab, models[0].config)
        out.extend(h.surface for h in ensemble_decode(models, batch))
    return out


def corpus_cider(models, examples: list[Example]) -> float:
    captions = decode_examples(models, examples)
    return metrics.cider([c.split() for c in captions], [e.references for e in examples])[0]


# -- pipeline --------------------------------------------------------------


@dataclass
class StageResult:
    model: CaptionModel
    optimizer: Adam
    schedule: ScheduleState
    history: list


def train_ce(model: CaptionModel, examples, config: TrainConfig, train_log=None,
             keep_snapshots: bool = False) -> StageResult:
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(model.params, OptimizerConfig(base_lr=config.base_lr, warmup_steps=config.warmup_steps))
    schedule = ScheduleState()
    history = []
    for epoch in range(config.ce_epochs):
        loss = ce_epoch(model, examples, opt, schedule, rng, config.batch_size, config.clip_norm, train_log)
        history.append({"epoch": epoch, "loss": loss, "step": schedule.step,
                        "snapshot": _snapshot(model, opt, schedule) if keep_snapshots else None})
        log.info("ce epoch %d loss %.4f step %d", epoch, loss, schedule.step)
    return StageResult(model, opt, schedule, history)


def _snapshot(model, opt, schedule):
    return ({k: p.data.copy() for k, p in model.params.items()},
            opt.state_tensors(), schedule.step)


def scst_schedule(config: TrainConfig, last_ce_step: int) -> ScheduleState:
    if config.scst_offset is None:
        return ScheduleState.for_scst(last_ce_step)
    return ScheduleState.for_scst(last_ce_step, config.scst_offset)


def train_scst(model: CaptionModel, examples, config: TrainConfig, optimizer: Adam | None,
               last_ce_step: int, train_log=None) -> StageResult:
    """SCST from a CE model; keeps the CE optimizer state when given."""
    rng = np.random.default_rng([config.seed, 2])
    opt_cfg = OptimizerConfig(base_lr=config.scst_base_lr or config.base_lr,
                              warmup_steps=config.warmup_steps)
    if optimizer is None:
        optimizer = Adam(model.params, opt_cfg)
    else:
        optimizer.config = opt_cfg
    schedule = scst_schedule(config, last_ce_step)
    idf = metrics.build_idf([e.references for e in examples])
    history = []
    for epoch in range(config.scst_epochs):
        r = scst_epoch(model, examples, optimizer, schedule, idf, rng, config.batch_size,
                       config.reward, config.clip_norm, train_log)
        history.append({"epoch": epoch, "reward": r, "step": schedule.step})
        log.info("scst epoch %d reward %.4f", epoch, r)
    return StageResult(model, optimizer, schedule, history)


def pick_scst_init(ce: StageResult, config: TrainConfig):
    """Parameters to start SCST from: the last CE epoch, or a random one in the final third."""
    if config.scst_init == "last" or not ce.history or ce.history[-1]["snapshot"] is None:
        return None
    rng = np.random.default_rng([config.seed, 3])
    n = len(ce.history)
    lo = n - max(1, n // 3)
    return ce.history[int(rng.integers(lo, n))]["snapshot"]


def run_pipeline(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
                 embedder: Embedder, limits: ChannelLimits, out_dir=None, variations=None,
                 log_path=None) -> list[dict]:
    """CE then SCST for every variation; returns one result dict per checkpoint.

    ``variations`` maps field names (any ModelConfig or TrainConfig field)
    to lists of values; their product is the grid.
    """
    variations = variations or {}
    keys = sorted(variations)
    train_ex = prepare_examples(dataset, "train", embedder, limits)
    val_ex = prepare_examples(dataset, "val", embedder, limits)
    results = []
    for values in itertools.product(*(variations[k] for k in keys)):
        overrides = dict(zip(keys, values))
        mc = replace(model_config, **{k: v for k, v in overrides.items() if hasattr(model_config, k)})
        tc = replace(train_config, **{k: v for k, v in overrides.items() if hasattr(train_config, k)})
        if "seed" in overrides:
            mc = replace(mc, seed=overrides["seed"])
        mc = replace(mc, vocab_size=len(dataset.vocab))
        tlog = TrainLog(log_path)
        model = CaptionModel(mc, dataset.vocab)
        ce = train_ce(model, train_ex, tc, tlog, keep_snapshots=tc.scst_init != "last")
        ce_cider = corpus_cider(model, val_ex) if val_ex else None
        snap = pick_scst_init(ce, tc)
        opt, last_step = ce.optimizer, ce.schedule.step
        if snap is not None:
            params, opt_state, last_step = snap
            for k, p in model.params.items():
                p.data = params[k].copy()
            opt.load_state_tensors(opt_state)
        name = "_".join(f"{k}-{v}" for k, v in overrides.items()) or "model"
        if out_dir:
            model.save(os.path.join(out_dir, name, "ce"), opt, {"stage": "ce", "step": last_step})
        scst = train_scst(model, train_ex, tc, opt, last_step, tlog) if tc.scst_epochs else None
        scst_cider = corpus_cider(model, val_ex) if (val_ex and scst) else None
        if out_dir and scst:
            model.save(os.path.join(out_dir, name, "scst"), scst.optimizer,
                       {"stage": "scst", "step": scst.schedule.step})
        results.append({"name": name, "model": model, "model_config": asdict(mc),
                        "train_config": asdict(tc), "ce_cider": ce_cider, "scst_cider": scst_cider,
                        "ce_history": [{k: v for k, v in h.items() if k != "snapshot"} for h in ce.history],
                        "scst_history": scst.history if scst else []})
    return results
