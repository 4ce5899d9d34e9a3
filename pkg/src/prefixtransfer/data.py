"""Synthetic corpora, vocabulary, tokenization, and dataset ingestion.

Three task kinds over the two mini-languages:

  summarization    program -> English description of the program
  translation      program -> the same program in the other language
  classification   program -> "buggy" | "clean" (planted use-before-assign)

Corpus generation is a pure function of (language, kind, sizes, seed);
splits are disjoint by raw source text. Tokenization is whitespace-based
with reserved ids PAD=0, BOS=1, EOS=2, UNK=3.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .autodiff import named_stream
from .checkpoint import stable_fingerprint
from .errors import ConfigError, DataError, IngestionError
from .minilang import (
    LANGUAGES,
    describe,
    generate_program,
    is_defective,
    plant_defect,
    render,
)

KINDS = ("summarization", "translation", "classification")
KIND_ABBREV = {"summarization": "sum", "translation": "trans", "classification": "cls"}
LABELS = ("buggy", "clean")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str
    source_language: str
    target_language: str | None = None
    dataset_path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == "translation" and not self.target_language:
            raise ConfigError(f"task {self.task_id!r}: translation needs target_language")


@dataclass
class Example:
    raw_source: str
    raw_target: str
    source_tokens: list[int] = field(default_factory=list)
    target_tokens: list[int] = field(default_factory=list)


class Vocab:
    """Token <-> id bijection with fixed reserved ids."""

    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, tokens):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens must be unique")
        self._id_to_token = list(self.RESERVED) + [t for t in tokens if t not in self.RESERVED]
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, token):
        return token in self._token_to_id

    def token_id(self, token: str) -> int:
        return self._token_to_id.get(token, self.UNK)

    def token(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def encode(self, text: str) -> list[int]:
        return [self._token_to_id.get(t, self.UNK) for t in text.split()]

    def encode_target(self, text: str) -> list[int]:
        return [self.BOS] + self.encode(text) + [self.EOS]

    def decode(self, ids, keep_special: bool = False) -> str:
        special = {self.PAD, self.BOS, self.EOS}
        tokens = [self._id_to_token[i] for i in ids
                  if keep_special or i not in special]
        return " ".join(tokens)

    def checksum(self) -> str:
        return stable_fingerprint(self._id_to_token)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self._id_to_token, indent=2) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = json.loads(Path(path).read_text(encoding="utf-8"))
        if tokens[: len(cls.RESERVED)] != list(cls.RESERVED):
            raise DataError(f"{path}: reserved tokens corrupted")
        return cls(tokens[len(cls.RESERVED):])


@dataclass
class Corpus:
    task: TaskSpec
    train: list[Example]
    dev: list[Example]
    test: list[Example]
    seed: int
    vocab_checksum: str | None = None

    def split(self, name: str) -> list[Example]:
        if name not in ("train", "dev", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "dev": len(self.dev), "test": len(self.test)}


def default_task_id(language: str, kind: str) -> str:
    return f"{language}-{KIND_ABBREV[kind]}"


def generate_minilang_corpus(language: str, kind: str, n_train: int, n_dev: int,
                             n_test: int, seed: int, *, max_source_tokens: int = 56,
                             max_target_tokens: int = 44) -> Corpus:
    """Deterministic synthetic corpus; splits disjoint by raw source text."""
    if language not in LANGUAGES:
        raise ConfigError(f"unknown mini-language {language!r}")
    if kind not in KINDS:
        raise ConfigError(f"unknown task kind {kind!r}")
    for name, size in (("n_train", n_train), ("n_dev", n_dev), ("n_test", n_test)):
        if size < 1:
            raise ConfigError(f"{name} must be >= 1, got {size}")
    other = "beta" if language == "alpha" else "alpha"
    rng = named_stream(seed, f"corpus.{language}.{kind}")
    total = n_train + n_dev + n_test
    examples: list[Example] = []
    seen: set[str] = set()
    attempts = 0
    while len(examples) < total:
        attempts += 1
        if attempts > 200 * total + 1000:
            raise DataError(
                f"could not generate {total} unique {language}/{kind} examples"
            )
        program = generate_program(rng)
        if kind == "classification":
            want_defect = len(examples) % 2 == 1
            if want_defect:
                planted = plant_defect(rng, program)
                if planted is None:
                    continue
                program = planted
            if is_defective(program) != want_defect:
                continue
            source = render(program, language)
            target = "buggy" if want_defect else "clean"
        elif kind == "summarization":
            if is_defective(program):
                continue
            source = render(program, language)
            target = describe(program)
        else:
            if is_defective(program):
                continue
            source = render(program, language)
            target = render(program, other)
        if source in seen:
            continue
        if len(source.split()) > max_source_tokens:
            continue
        if len(target.split()) + 2 > max_target_tokens:
            continue
        seen.add(source)
        examples.append(Example(raw_source=source, raw_target=target))
    task = TaskSpec(
        task_id=default_task_id(language, kind),
        kind=kind,
        source_language=language,
        target_language=other if kind == "translation" else None,
    )
    return Corpus(task=task, train=examples[:n_train],
                  dev=examples[n_train:n_train + n_dev],
                  test=examples[n_train + n_dev:], seed=seed)


def build_vocab(corpora) -> Vocab:
    """Union of whitespace tokens across all corpora; reserved then lexicographic."""
    corpora = list(corpora)
    if not corpora:
        raise ConfigError("build_vocab needs at least one corpus")
    tokens: set[str] = set()
    for corpus in corpora:
        for exs in (corpus.train, corpus.dev, corpus.test):
            for ex in exs:
                tokens.update(ex.raw_source.split())
                tokens.update(ex.raw_target.split())
    return Vocab(sorted(tokens))


def encode_corpus(corpus: Corpus, vocab: Vocab) -> Corpus:
    """Fill token ids for every example; stamps the vocab checksum."""

    def encode_many(exs):
        out = []
        for ex in exs:
            source = vocab.encode(ex.raw_source)
            if not source:
                raise DataError(f"empty source text in task {corpus.task.task_id!r}")
            out.append(Example(raw_source=ex.raw_source, raw_target=ex.raw_target,
                               source_tokens=source,
                               target_tokens=vocab.encode_target(ex.raw_target)))
        return out

    return Corpus(task=corpus.task, train=encode_many(corpus.train),
                  dev=encode_many(corpus.dev), test=encode_many(corpus.test),
                  seed=corpus.seed, vocab_checksum=vocab.checksum())


def subsample(corpus: Corpus, rate: float, seed: int) -> Corpus:
    """Keep ceil(rate * |train|) training examples; dev/test untouched."""
    if not (0.0 < rate <= 1.0):
        raise ConfigError(f"subsample rate must lie in (0, 1], got {rate}")
    if rate == 1.0:
        return corpus
    n = math.ceil(rate * len(corpus.train))
    rng = named_stream(seed, f"subsample.{corpus.task.task_id}")
    keep = sorted(rng.choice(len(corpus.train), size=n, replace=False).tolist())
    return dataclasses.replace(corpus, train=[corpus.train[i] for i in keep])


# ---------------------------------------------------------------------------
# disk formats


def load_jsonl(path, vocab: Vocab, task: TaskSpec) -> Corpus:
    """Ingest a JSONL file of {"source", "target"} objects into a train split.

    Malformed lines are collected and reported together with their line
    numbers. An optional "label" field substitutes for "target".
    """
    text = Path(path).read_text(encoding="utf-8")
    examples: list[Example] = []
    problems: list[tuple[int, str]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append((lineno, f"invalid JSON ({exc.msg})"))
            continue
        if not isinstance(obj, dict):
            problems.append((lineno, "not a JSON object"))
            continue
        source = obj.get("source")
        target = obj.get("target", obj.get("label"))
        if not isinstance(source, str) or not source.strip():
            problems.append((lineno, "missing field 'source'"))
            continue
        if not isinstance(target, str):
            problems.append((lineno, "missing field 'target'"))
            continue
        examples.append(Example(raw_source=source, raw_target=target))
    if problems:
        raise IngestionError(path, problems)
    if not examples:
        raise DataError(f"{path}: no examples")
    corpus = Corpus(task=task, train=examples, dev=[], test=[], seed=0)
    return encode_corpus(corpus, vocab)


def save_corpus(directory, corpus: Corpus, vocab_checksum: str) -> None:
    """Write raw splits as JSONL plus a manifest with sizes and seeds."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in ("train", "dev", "test"):
        lines = [json.dumps({"source": ex.raw_source, "target": ex.raw_target})
                 for ex in corpus.split(split)]
        (directory / f"{split}.jsonl").write_text("\n".join(lines) + "\n",
                                                  encoding="utf-8")
    manifest = {
        "task_id": corpus.task.task_id,
        "kind": corpus.task.kind,
        "source_language": corpus.task.source_language,
        "target_language": corpus.task.target_language,
        "sizes": corpus.sizes,
        "seed": corpus.seed,
        "vocab_checksum": vocab_checksum,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                             encoding="utf-8")


def read_corpus(directory, vocab: Vocab) -> Corpus:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest["vocab_checksum"] != vocab.checksum():
        raise DataError(f"{directory}: corpus was built against a different vocabulary")
    task = TaskSpec(task_id=manifest["task_id"], kind=manifest["kind"],
                    source_language=manifest["source_language"],
                    target_language=manifest.get("target_language"),
                    dataset_path=str(directory))
    splits = {}
    for split in ("train", "dev", "test"):
        examples = []
        text = (directory / f"{split}.jsonl").read_text(encoding="utf-8")
        for line in text.splitlines():
            if line.strip():
                obj = json.loads(line)
                examples.append(Example(raw_source=obj["source"], raw_target=obj["target"]))
        splits[split] = examples
    corpus = Corpus(task=task, train=splits["train"], dev=splits["dev"],
                    test=splits["test"], seed=manifest["seed"])
    return encode_corpus(corpus, vocab)
