"""Two-stage training: continual source-task learning, then target tuning.

Stage one (``train_source``) walks every source task once per epoch. At
each task switch the backbone is re-instantiated from the base snapshot
("fresh" model), while the knowledge prefix is the same storage throughout;
only the prefix survives the stage. Per-task batch counts come from the
smoothed log-proportional allocation in :mod:`.sampling`.

Stage two (``specify_target``) concatenates a (collapsed) prefix to a fresh
backbone and tunes the whole model on the target task, tracking the dev
metric per epoch and returning the best-dev checkpoint.

All randomness flows through named streams derived from the run seed, so a
(config, seed) pair fully determines every loss trace and report.
"""

from __future__ import annotations

import dataclasses
import json
import statistics
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, GradientTape, adam_step, backward, named_stream, zero_grad
from .data import Corpus, TaskSpec, Vocab, subsample
from .errors import ConfigError, NumericsError, TrainingAborted
from .metrics import evaluate, _pad_batch
from .model import (
    Backbone,
    BackboneSnapshot,
    PrefixBank,
    collapse_prefix_encoder,
    load_backbone,
    loss_on_batch,
    snapshot,
)
from .sampling import SamplerState, plan_epoch

LOW_RESOURCE_RATES = (0.05, 0.10, 0.20)


@dataclass
class SourceTrainPlan:
    epochs: int = 2
    batch_budget: int = 120
    batch_size: int = 8
    learning_rate: float = 5e-4
    visit_order: object = "shuffled"  # "shuffled" or a fixed list of task ids
    smoothing: float = 1.0
    dev_batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"source epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class TrainReport:
    """Loss/metric trace of one run plus the identifiers that produced it.

    ``wall_time_s`` is in-memory only: it is excluded from the JSON form so
    that identical (config, seed) runs serialize byte-identically.
    """

    config_fingerprint: str = ""
    seeds: list[int] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    tags: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    backbone_hashes: list[dict] = field(default_factory=list)
    dev_trace: list[dict] = field(default_factory=list)
    wall_time_s: float = 0.0

    def losses(self) -> list[float]:
        return [rec["loss"] for rec in self.steps]

    def to_json(self) -> str:
        doc = {
            "config_fingerprint": self.config_fingerprint,
            "seeds": self.seeds,
            "steps": self.steps,
            "epochs": self.epochs,
            "tags": self.tags,
            "meta": self.meta,
            "backbone_hashes": self.backbone_hashes,
            "dev_trace": self.dev_trace,
        }
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainReport":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**doc)


@dataclass
class TargetRun:
    backbone: Backbone
    prefix: PrefixBank | None
    report: TrainReport
    best_dev_metric: float
    best_epoch: int


def _record_step(report: TrainReport, epoch: int, task_id: str, step: int,
                 loss: float) -> None:
    report.steps.append({"epoch": epoch, "task_id": task_id, "step": step,
                         "loss": loss})


def _train_step(backbone, prefix, src, tgt, params, adam, drop_rng, pad_id):
    with GradientTape():
        loss = loss_on_batch(backbone, prefix, src, tgt, pad_id=pad_id,
                             train=True, rng=drop_rng)
        backward(loss)
    adam_step(params, adam)
    zero_grad(params)
    return loss.item()


def _dev_loss(backbone, prefix, corpus: Corpus, pad_id: int, cap: int = 128,
              batch_size: int = 32) -> float:
    """Teacher-forced loss over (a capped slice of) the dev split, token-weighted."""
    examples = corpus.dev[:cap] if cap else corpus.dev
    if not examples:
        return float("nan")
    total, weight = 0.0, 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        src = _pad_batch([ex.source_tokens for ex in chunk], pad_id)
        tgt = _pad_batch([ex.target_tokens for ex in chunk], pad_id)
        n_tokens = int((tgt[:, 1:] != pad_id).sum())
        loss = loss_on_batch(backbone, prefix, src, tgt, pad_id=pad_id)
        total += loss.item() * n_tokens
        weight += n_tokens
    return total / weight


def train_source(tasks, plan: SourceTrainPlan, prefix: PrefixBank,
                 base: BackboneSnapshot, seed: int, *,
                 config_fingerprint: str = "",
                 pad_id: int = 0, collect_dev: bool = True) -> tuple[PrefixBank, TrainReport]:
    """Continual learning over source tasks; only the prefix survives.

    tasks: list of (TaskSpec, Corpus) sharing one vocabulary. Per epoch,
    every task is visited once (order per plan policy); at each visit the
    backbone is reloaded fresh from ``base`` and both backbone and prefix
    take one Adam step per batch. Backbone updates are discarded at every
    switch and at the end.
    """
    tasks = list(tasks)
    if not tasks:
        raise ConfigError("train_source needs at least one source task")
    task_ids = [task.task_id for task, _ in tasks]
    if len(set(task_ids)) != len(task_ids):
        raise ConfigError(f"duplicate task ids: {task_ids}")
    checksums = {corpus.vocab_checksum for _, corpus in tasks}
    if len(checksums) != 1 or None in checksums:
        raise ConfigError("source corpora must be encoded against one shared vocabulary")
    corpora = {task.task_id: corpus for task, corpus in tasks}
    sampler = SamplerState(task_ids, [len(c.train) for _, c in tasks],
                           plan.smoothing, seed)
    order_rng = named_stream(seed, "source.visit-order")
    batch_rng = named_stream(seed, "source.batches")
    drop_rng = named_stream(seed, "source.dropout")
    base_digest = base.digest()
    report = TrainReport(
        config_fingerprint=config_fingerprint,
        seeds=[seed],
        tags=["source"],
        meta={
            "task_ids": task_ids,
            "sizes": {tid: len(corpora[tid].train) for tid in task_ids},
            "probabilities": [float(p) for p in sampler.probs],
            "smoothing": plan.smoothing,
            "base_digest": base_digest,
            "plan": {"epochs": plan.epochs, "batch_budget": plan.batch_budget,
                     "batch_size": plan.batch_size,
                     "learning_rate": plan.learning_rate,
                     "visit_order": plan.visit_order
                     if isinstance(plan.visit_order, str) else list(plan.visit_order)},
        },
    )
    started = time.perf_counter()
    global_step = 0
    for epoch in range(1, plan.epochs + 1):
        if plan.visit_order == "shuffled":
            order = [task_ids[i] for i in order_rng.permutation(len(task_ids))]
        else:
            order = list(plan.visit_order)
        allocation = plan_epoch(sampler, plan.batch_budget, order=order)
        for task_id, n_batches in allocation:
            backbone = load_backbone(base)
            report.backbone_hashes.append({
                "epoch": epoch, "task_id": task_id,
                "backbone_digest": backbone.digest(), "base_digest": base_digest,
            })
            params = backbone.parameters() + prefix.parameters()
            adam = AdamState(params, plan.learning_rate)
            train = corpora[task_id].train
            for _ in range(n_batches):
                picks = batch_rng.integers(0, len(train), size=plan.batch_size)
                chunk = [train[int(i)] for i in picks]
                src = _pad_batch([ex.source_tokens for ex in chunk], pad_id)
                tgt = _pad_batch([ex.target_tokens for ex in chunk], pad_id)
                try:
                    loss = _train_step(backbone, prefix, src, tgt, params, adam,
                                       drop_rng, pad_id)
                except NumericsError as exc:
                    report.wall_time_s = time.perf_counter() - started
                    raise TrainingAborted(str(exc), report=report) from exc
                _record_step(report, epoch, task_id, global_step, loss)
                global_step += 1
            if collect_dev:
                value = _dev_loss(backbone, prefix, corpora[task_id], pad_id,
                                  cap=plan.dev_batch_size,
                                  batch_size=plan.dev_batch_size)
                report.epochs.append({"epoch": epoch, "task_id": task_id,
                                      "metric_name": "dev_loss", "value": value})
    report.wall_time_s = time.perf_counter() - started
    return prefix, report


def specify_target(target, prefix: PrefixBank | None, fresh: BackboneSnapshot,
                   vocab: Vocab, *, epochs: int, learning_rate: float,
                   batch_size: int = 8, seed: int = 0, eval_every: int = 10,
                   tag: str = "transfer", config_fingerprint: str = "",
                   extra_tags=(), extra_meta=None) -> TargetRun:
    """Tune a fresh backbone plus (optional) prefix on the target task.

    The prefix is collapsed first if it still carries its encoder. Dev
    metric is traced per epoch; the best-dev parameter set is restored
    before returning. ``prefix=None`` is plain fine-tuning.
    """
    task, corpus = target
    if epochs < 1:
        raise ConfigError(f"target epochs must be >= 1, got {epochs}")
    if corpus.vocab_checksum != vocab.checksum():
        raise ConfigError("target corpus was encoded against a different vocabulary")
    if prefix is not None and prefix.has_encoder:
        prefix = collapse_prefix_encoder(prefix)
    backbone = load_backbone(fresh)
    if prefix is not None:
        prefix.check_compatible(backbone.config)
    pad_id = vocab.PAD
    params = backbone.parameters() + (prefix.parameters() if prefix is not None else [])
    adam = AdamState(params, learning_rate)
    shuffle_rng = named_stream(seed, "target.shuffle")
    drop_rng = named_stream(seed, "target.dropout")
    metric_name = "accuracy" if task.kind == "classification" else "bleu4"
    report = TrainReport(
        config_fingerprint=config_fingerprint,
        seeds=[seed],
        tags=[tag, *extra_tags],
        meta={
            "task_id": task.task_id,
            "kind": task.kind,
            "epochs": epochs,
            "learning_rate": learning_rate,
            "batch_size": batch_size,
            "prefix": "none" if prefix is None else
                      ("zero-length" if prefix.prefix_length == 0 else "present"),
            "train_examples": len(corpus.train),
            **(extra_meta or {}),
        },
    )
    started = time.perf_counter()
    train = corpus.train
    best_value = float("-inf")
    best_epoch = -1
    best_params: dict[str, np.ndarray] = {}
    global_step = 0
    for epoch in range(1, epochs + 1):
        permutation = shuffle_rng.permutation(len(train))
        for start in range(0, len(train), batch_size):
            chunk = [train[int(i)] for i in permutation[start:start + batch_size]]
            src = _pad_batch([ex.source_tokens for ex in chunk], pad_id)
            tgt = _pad_batch([ex.target_tokens for ex in chunk], pad_id)
            try:
                loss = _train_step(backbone, prefix, src, tgt, params, adam,
                                   drop_rng, pad_id)
            except NumericsError as exc:
                report.wall_time_s = time.perf_counter() - started
                raise TrainingAborted(str(exc), report=report) from exc
            _record_step(report, epoch, task.task_id, global_step, loss)
            global_step += 1
            if eval_every and global_step % eval_every == 0 and corpus.dev:
                report.dev_trace.append({
                    "step": global_step,
                    "dev_loss": _dev_loss(backbone, prefix, corpus, pad_id),
                })
        if corpus.dev:
            value = evaluate(backbone, prefix, corpus, vocab, split="dev").value
            report.epochs.append({"epoch": epoch, "task_id": task.task_id,
                                  "metric_name": metric_name, "value": value})
            report.epochs.append({"epoch": epoch, "task_id": task.task_id,
                                  "metric_name": "dev_loss",
                                  "value": _dev_loss(backbone, prefix, corpus, pad_id)})
            if value > best_value:
                best_value = value
                best_epoch = epoch
                best_params = {name: p.data.copy() for name, p in params}
    if best_params:
        for name, p in params:
            p.data = best_params[name].copy()
    report.meta["best_dev_metric"] = best_value
    report.meta["best_epoch"] = best_epoch
    report.wall_time_s = time.perf_counter() - started
    return TargetRun(backbone=backbone, prefix=prefix, report=report,
                     best_dev_metric=best_value, best_epoch=best_epoch)


def ablate_random_prefix(target, fresh: BackboneSnapshot, vocab: Vocab, *,
                         epochs: int, learning_rate: float, batch_size: int = 8,
                         seed: int = 0, eval_every: int = 10,
                         config_fingerprint: str = "",
                         extra_tags=(), extra_meta=None) -> TargetRun:
    """Target tuning with a freshly initialized prefix (no source knowledge)."""
    random_prefix = PrefixBank.init_flat(fresh.config, seed)
    meta = {"prefix_provenance": "random-init", **(extra_meta or {})}
    return specify_target(target, random_prefix, fresh, vocab, epochs=epochs,
                          learning_rate=learning_rate, batch_size=batch_size,
                          seed=seed, eval_every=eval_every, tag="ablation-random",
                          config_fingerprint=config_fingerprint,
                          extra_tags=extra_tags, extra_meta=meta)


def low_resource_run(target, rate: float, prefix: PrefixBank | None,
                     fresh: BackboneSnapshot, vocab: Vocab, *, epochs: int,
                     learning_rate: float, batch_size: int = 8, seed: int = 0,
                     eval_every: int = 10, tag: str = "transfer",
                     config_fingerprint: str = "") -> TargetRun:
    """Subsample the target train split to ``rate`` and run specify_target."""
    if rate not in LOW_RESOURCE_RATES and rate != 1.0:
        warnings.warn(f"low-resource rate {rate} outside the standard set "
                      f"{LOW_RESOURCE_RATES}")
    task, corpus = target
    reduced = subsample(corpus, rate, seed)
    return specify_target((task, reduced), prefix, fresh, vocab, epochs=epochs,
                          learning_rate=learning_rate, batch_size=batch_size,
                          seed=seed, eval_every=eval_every, tag=tag,
                          config_fingerprint=config_fingerprint,
                          extra_tags=(f"rate={rate}",),
                          extra_meta={"rate": rate})


def order_experiment(tasks, orders, plan: SourceTrainPlan, base: BackboneSnapshot,
                     target, vocab: Vocab, seeds, *, target_epochs: int,
                     target_lr: float, target_batch_size: int = 8,
                     config_fingerprint: str = "") -> dict:
    """Train the prefix under several task orders and compare target metrics.

    Every order runs with the same seed set; the summary reports the spread
    (max - min) of per-order mean metrics against the across-seed standard
    deviation of the first order.
    """
    orders = [list(order) for order in orders]
    if len(orders) < 2:
        raise ConfigError("order_experiment needs at least two orders")
    task_ids = [task.task_id for task, _ in tasks]
    for order in orders:
        if sorted(order) != sorted(task_ids):
            raise ConfigError(f"order {order} is not a permutation of {task_ids}")
    if len({tuple(o) for o in orders}) != len(orders):
        warnings.warn("duplicate task orders supplied")
    rows = []
    for order in orders:
        fixed_plan = dataclasses.replace(plan, visit_order=list(order))
        metrics = []
        for seed in seeds:
            prefix0 = PrefixBank.init_encoded(base.config, seed)
            trained, _ = train_source(tasks, fixed_plan, prefix0, base, seed,
                                      config_fingerprint=config_fingerprint,
                                      collect_dev=False)
            run = specify_target(target, trained, base, vocab,
                                 epochs=target_epochs, learning_rate=target_lr,
                                 batch_size=target_batch_size, seed=seed,
                                 eval_every=0,
                                 config_fingerprint=config_fingerprint)
            metrics.append(run.best_dev_metric)
        rows.append({
            "order": list(order),
            "metrics": metrics,
            "mean": statistics.fmean(metrics),
            "std": statistics.stdev(metrics) if len(metrics) > 1 else 0.0,
        })
    means = [row["mean"] for row in rows]
    spread = max(means) - min(means)
    within = rows[0]["std"]
    return {
        "rows": rows,
        "spread": spread,
        "within_order_std": within,
        "spread_below_within_std": spread < within,
    }


def pretrain_base(corpora, config, vocab: Vocab, *, steps: int, batch_size: int,
                  learning_rate: float, seed: int, mask_rate: float = 0.15,
                  config_fingerprint: str = "") -> tuple[BackboneSnapshot, TrainReport]:
    """Denoising pretraining over program texts: mask 15%, reconstruct.

    Stands in for the published pretrained checkpoint that both training
    stages load their "fresh" backbones from. Masked positions reuse the
    UNK id (the reserved block is fixed and generated corpora never emit
    UNK otherwise).
    """
    texts = unimodal_texts(corpora, config.max_target_len - 2)
    if not texts:
        raise ConfigError("pretrain_base: no program texts available")
    backbone = Backbone.init(config, seed)
    params = backbone.parameters()
    adam = AdamState(params, learning_rate)
    batch_rng = named_stream(seed, "pretrain.batches")
    mask_rng = named_stream(seed, "pretrain.mask")
    drop_rng = named_stream(seed, "pretrain.dropout")
    report = TrainReport(config_fingerprint=config_fingerprint, seeds=[seed],
                         tags=["pretrain"],
                         meta={"steps": steps, "texts": len(texts),
                               "mask_rate": mask_rate})
    started = time.perf_counter()
    pad_id, bos, eos, unk = vocab.PAD, vocab.BOS, vocab.EOS, vocab.UNK
    for step in range(steps):
        picks = batch_rng.integers(0, len(texts), size=batch_size)
        sources, targets = [], []
        for i in picks:
            tokens = texts[int(i)]
            corrupt = [unk if mask_rng.random() < mask_rate else t for t in tokens]
            sources.append(corrupt)
            targets.append([bos] + tokens + [eos])
        src = _pad_batch(sources, pad_id)
        tgt = _pad_batch(targets, pad_id)
        try:
            loss = _train_step(backbone, None, src, tgt, params, adam, drop_rng, pad_id)
        except NumericsError as exc:
            report.wall_time_s = time.perf_counter() - started
            raise TrainingAborted(str(exc), report=report) from exc
        _record_step(report, 1, "denoise", step, loss)
    report.wall_time_s = time.perf_counter() - started
    snap = snapshot(backbone)
    snap.provenance = "base-pretrained"
    return snap, report


def unimodal_texts(corpora, max_tokens: int) -> list[list[int]]:
    """Deduplicated program-side token sequences from the train splits."""
    seen: set[str] = set()
    texts: list[list[int]] = []
    for corpus in corpora:
        for ex in corpus.train:
            candidates = [(ex.raw_source, ex.source_tokens)]
            if corpus.task.kind == "translation":
                candidates.append((ex.raw_target, ex.target_tokens[1:-1]))
            for raw, tokens in candidates:
                if raw in seen or not tokens:
                    continue
                seen.add(raw)
                texts.append(list(tokens)[:max_tokens])
    return texts
