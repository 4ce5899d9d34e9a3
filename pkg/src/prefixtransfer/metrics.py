"""Evaluation: smoothed corpus-level BLEU-4, accuracy, and model scoring."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import Corpus, Vocab
from .errors import DataError
from .model import Backbone, PrefixBank, forward, generate_greedy_batch


@dataclass(frozen=True)
class EvalResult:
    task_id: str
    metric: str
    value: float
    n_examples: int

    def __post_init__(self):
        if self.n_examples < 1:
            raise DataError("EvalResult needs at least one example")
        hi = 100.0 if self.metric == "bleu4" else 1.0
        if not (0.0 <= self.value <= hi):
            raise DataError(f"{self.metric} value {self.value} outside [0, {hi}]")


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4_smoothed(hypotheses, references) -> float:
    """Corpus BLEU with orders 1-4, add-one smoothing for n >= 2, scaled to [0, 100].

    Brevity penalty is exp(1 - r/c) when the hypothesis corpus is shorter
    than the reference corpus. A zero unigram precision gives score 0.
    """
    hypotheses = list(hypotheses)
    references = list(references)
    if not hypotheses:
        raise DataError("bleu4_smoothed: empty hypothesis list")
    if len(hypotheses) != len(references):
        raise DataError(
            f"bleu4_smoothed: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    matches = [0] * 5
    totals = [0] * 5
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        if not ref:
            raise DataError("bleu4_smoothed: empty reference")
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            totals[n] += max(0, len(hyp) - n + 1)
            matches[n] += sum(min(c, ref_counts[g]) for g, c in counts.items())
    if hyp_len == 0 or matches[1] == 0:
        return 0.0
    log_precision = math.log(matches[1] / totals[1])
    for n in range(2, 5):
        log_precision += math.log((matches[n] + 1) / (totals[n] + 1))
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_precision / 4.0)


def accuracy(predicted, gold) -> float:
    predicted, gold = list(predicted), list(gold)
    if not predicted:
        raise DataError("accuracy: empty prediction list")
    if len(predicted) != len(gold):
        raise DataError(f"accuracy: {len(predicted)} predictions vs {len(gold)} labels")
    return sum(p == g for p, g in zip(predicted, gold)) / len(predicted)


def _pad_batch(seqs, pad_id: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def evaluate(backbone: Backbone, prefix: PrefixBank | None, corpus: Corpus,
             vocab: Vocab, split: str = "test", batch_size: int = 32) -> EvalResult:
    """Greedy-decode BLEU for generation kinds, label accuracy for classification.

    Classification scores the first generated position restricted to the
    label-token set, so an untrained model lands near chance instead of
    emitting arbitrary vocabulary. Evaluation never mutates model state.
    """
    examples = corpus.split(split)
    if not examples:
        raise DataError(f"corpus {corpus.task.task_id!r} has an empty {split!r} split")
    kind = corpus.task.kind
    pad, bos, eos = vocab.PAD, vocab.BOS, vocab.EOS
    if kind == "classification":
        label_ids = sorted({ex.target_tokens[1] for ex in examples})
        predictions: list[int] = []
        golds: list[int] = []
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            src = _pad_batch([ex.source_tokens for ex in chunk], pad)
            tgt_in = np.full((len(chunk), 1), bos, dtype=np.int64)
            logits = forward(backbone, prefix, src, tgt_in, pad_id=pad)
            label_logits = logits.data[:, 0, :][:, label_ids]
            picks = label_logits.argmax(axis=1)
            predictions.extend(label_ids[int(i)] for i in picks)
            golds.extend(ex.target_tokens[1] for ex in chunk)
        return EvalResult(corpus.task.task_id, "accuracy",
                          accuracy(predictions, golds), len(examples))
    hypotheses: list[list[int]] = []
    references: list[list[int]] = []
    max_len = backbone.config.max_target_len - 1
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        src = _pad_batch([ex.source_tokens for ex in chunk], pad)
        decoded = generate_greedy_batch(backbone, prefix, src, max_len=max_len,
                                        bos_id=bos, eos_id=eos, pad_id=pad)
        for row, ex in zip(decoded, chunk):
            hypotheses.append([t for t in row if t not in (pad, bos, eos)])
            references.append([t for t in ex.target_tokens if t not in (pad, bos, eos)])
    return EvalResult(corpus.task.task_id, "bleu4",
                      bleu4_smoothed(hypotheses, references), len(examples))
