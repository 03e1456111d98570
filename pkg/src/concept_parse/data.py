"""Corpus ingestion, leave-one-out splits, few-shot sampling, and wiki-style pretraining data.

Parse corpora arrive as TSV with header columns ``domain``, ``utterance``,
``semantic_parse``. Entity-tagging pretraining data arrives as JSON lines
``{"context": str, "mentions": [{"start", "end", "entity", "type"}]}``.
Either format may be gzip-compressed (``.gz`` suffix).
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO, Union

import numpy as np

from .errors import ConceptParseError, DataError, DomainNotFoundError, SpanAlignmentError
from .parse import (
    Concept,
    ConceptTag,
    ParseTree,
    Pointer,
    TargetSequence,
    TargetToken,
    Utterance,
    linearize,
    make_tag,
    parse_seqlogical,
    to_seqlogical,
    tokenize_utterance,
    tree_labels,
)

log = logging.getLogger(__name__)

UNSUPPORTED_MARKER = "UNSUPPORTED"


@dataclass(frozen=True)
class DatasetRecord:
    """One annotated utterance with its tree and linearized target."""

    domain: str
    utterance: Utterance
    tree: ParseTree
    target: TargetSequence

    def labels(self) -> set[str]:
        """Distinct intent/slot names appearing in the tree."""
        return {name for name, _ in tree_labels(self.tree)}


@dataclass(frozen=True)
class Mention:
    """A typed entity mention as character offsets into its sentence.

    ``start`` is inclusive and ``end`` exclusive, both aligned to whitespace
    token boundaries for convertible examples.
    """

    start: int
    end: int
    entity: str
    type_name: str


@dataclass(frozen=True)
class WikiExample:
    """One context sentence with its typed entity mentions."""

    context: str
    mentions: tuple[Mention, ...]


@dataclass(frozen=True)
class SpiConfig:
    """Few-shot sampling budget: at least ``k`` kept records per label."""

    k: int
    seed: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"samples-per-label k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class DomainSplit:
    """Leave-one-out partition of a corpus around one held-out domain."""

    held_out: str
    known_train: tuple[DatasetRecord, ...]
    known_valid: tuple[DatasetRecord, ...]
    heldout_train: tuple[DatasetRecord, ...]
    heldout_test: tuple[DatasetRecord, ...]


@dataclass
class LoadReport:
    """Row accounting for one loaded file."""

    total: int = 0
    loaded: int = 0
    skipped: int = 0
    dropped_mentions: int = 0
    messages: list[str] = field(default_factory=list)

    def note(self, message: str) -> None:
        self.skipped += 1
        if len(self.messages) < 20:
            self.messages.append(message)
        log.debug("skipping row: %s", message)


def _open_text(path: Union[str, Path]) -> TextIO:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            return gzip.open(path, "rt", encoding="utf-8")
        return open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def record_from_row(domain: str, utterance_text: str, annotation: str) -> DatasetRecord:
    """Build a DatasetRecord from one corpus row; raises on malformed input."""
    utterance = tokenize_utterance(utterance_text)
    tree = parse_seqlogical(annotation, utterance)
    target = linearize(tree, utterance)
    return DatasetRecord(domain=domain, utterance=utterance, tree=tree, target=target)


def load_topv2_tsv(path: Union[str, Path]) -> tuple[list[DatasetRecord], LoadReport]:
    """Load a TSV corpus; malformed rows are skipped and counted."""
    report = LoadReport()
    records: list[DatasetRecord] = []
    with _open_text(path) as handle:
        reader = csv.reader(handle, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a TSV header") from None
        try:
            col = {name: header.index(name)
                   for name in ("domain", "utterance", "semantic_parse")}
        except ValueError as exc:
            raise DataError(f"{path}: missing required TSV column ({exc})") from exc
        for line_no, row in enumerate(reader, start=2):
            report.total += 1
            if len(row) <= max(col.values()):
                report.note(f"line {line_no}: expected {len(header)} columns, got {len(row)}")
                continue
            try:
                records.append(record_from_row(
                    row[col["domain"]], row[col["utterance"]], row[col["semantic_parse"]]))
            except ConceptParseError as exc:
                report.note(f"line {line_no}: {exc}")
                continue
            report.loaded += 1
    log.info("loaded %d records from %s (%d skipped)", report.loaded, path, report.skipped)
    return records, report


def write_topv2_tsv(rows: Iterable[tuple[str, str, str]], path: Union[str, Path]) -> None:
    """Write (domain, utterance, semantic_parse) rows as a TSV corpus file."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wt", encoding="utf-8") as handle:
        handle.write("domain\tutterance\tsemantic_parse\n")
        for domain, utterance, annotation in rows:
            handle.write(f"{domain}\t{utterance}\t{annotation}\n")


def filter_unsupported(records: Sequence[DatasetRecord]) -> list[DatasetRecord]:
    """Drop records whose root intent name contains the unsupported marker."""
    return [r for r in records if UNSUPPORTED_MARKER not in r.tree.name]


def build_leave_one_out(train_records: Sequence[DatasetRecord],
                        test_records: Sequence[DatasetRecord],
                        held_out: str,
                        valid_fraction: float = 0.05,
                        seed: int = 0) -> DomainSplit:
    """Partition a corpus around one held-out domain.

    Known-domain training data comes from every other domain, with a seeded
    per-domain fraction held back for validation. The held-out domain's train
    and test records are passed through untouched.
    """
    domains = sorted({r.domain for r in train_records})
    if held_out not in domains:
        raise DomainNotFoundError(
            f"domain {held_out!r} not in corpus (available: {', '.join(domains)})")
    known_train: list[DatasetRecord] = []
    known_valid: list[DatasetRecord] = []
    for index, domain in enumerate(domains):
        if domain == held_out:
            continue
        domain_records = [r for r in train_records if r.domain == domain]
        rng = np.random.default_rng([seed, index])
        order = rng.permutation(len(domain_records))
        n_valid = max(1, round(valid_fraction * len(domain_records))) \
            if len(domain_records) > 1 else 0
        valid_positions = set(order[:n_valid].tolist())
        for pos, record in enumerate(domain_records):
            (known_valid if pos in valid_positions else known_train).append(record)
    return DomainSplit(
        held_out=held_out,
        known_train=tuple(known_train),
        known_valid=tuple(known_valid),
        heldout_train=tuple(r for r in train_records if r.domain == held_out),
        heldout_test=tuple(r for r in test_records if r.domain == held_out),
    )


def sample_spi(records: Sequence[DatasetRecord], cfg: SpiConfig) -> list[DatasetRecord]:
    """Greedy randomized covering sample for few-shot budgets.

    Records are shuffled with the config seed, then kept whenever some label
    they contain is still below ``k`` kept records. Every label ends with at
    least min(k, corpus frequency) kept records.
    """
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(records))
    counts: dict[str, int] = {}
    kept: list[DatasetRecord] = []
    for pos in order:
        record = records[int(pos)]
        labels = sorted(record.labels())
        if any(counts.get(label, 0) < cfg.k for label in labels):
            kept.append(record)
            for label in labels:
                counts[label] = counts.get(label, 0) + 1
    return kept


_SENTENCE_BREAK = re.compile(r"(?<=[.!?])\s+")


def _split_sentences(context: str) -> list[tuple[int, str]]:
    """(char offset, sentence) pairs; breaks after ., ! or ? plus whitespace."""
    out = []
    start = 0
    for match in _SENTENCE_BREAK.finditer(context):
        out.append((start, context[start:match.start()]))
        start = match.end()
    out.append((start, context[start:]))
    return [(off, s) for off, s in out if s.strip()]


def _resolve_overlaps(mentions: list[Mention], report: LoadReport) -> list[Mention]:
    """Keep the longest mention of each overlapping cluster."""
    kept: list[Mention] = []
    for mention in sorted(mentions, key=lambda m: (m.start - m.end, m.start, m.entity)):
        if any(mention.start < k.end and k.start < mention.end for k in kept):
            report.dropped_mentions += 1
            continue
        kept.append(mention)
    return sorted(kept, key=lambda m: m.start)


def load_wikiwiki_jsonl(path: Union[str, Path]) -> tuple[list[WikiExample], LoadReport]:
    """Load wiki contexts as per-sentence examples.

    Contexts are split into sentences; mentions crossing sentence boundaries
    are dropped and counted, and overlapping mentions are resolved in favor
    of the longest.
    """
    report = LoadReport()
    examples: list[WikiExample] = []
    with _open_text(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            report.total += 1
            try:
                payload = json.loads(line)
                context = payload["context"]
                raw_mentions = [
                    Mention(start=int(m["start"]), end=int(m["end"]),
                            entity=str(m["entity"]), type_name=str(m["type"]))
                    for m in payload.get("mentions", [])
                ]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                report.note(f"line {line_no}: {exc}")
                continue
            for offset, sentence in _split_sentences(context):
                local: list[Mention] = []
                for m in raw_mentions:
                    if m.start >= offset and m.end <= offset + len(sentence):
                        if m.start >= m.end:
                            report.dropped_mentions += 1
                            continue
                        local.append(Mention(m.start - offset, m.end - offset,
                                             m.entity, m.type_name))
                    elif m.start < offset + len(sentence) and m.end > offset:
                        # crosses this sentence's boundary
                        report.dropped_mentions += 1
                examples.append(WikiExample(
                    context=sentence,
                    mentions=tuple(_resolve_overlaps(local, report)),
                ))
            report.loaded += 1
    log.info("loaded %d wiki sentences from %s (%d rows skipped, %d mentions dropped)",
             len(examples), path, report.skipped, report.dropped_mentions)
    return examples, report


def wikiwiki_to_parse_example(
        example: WikiExample) -> tuple[Utterance, TargetSequence, list[ConceptTag]]:
    """Convert a wiki sentence into a flat tagging example.

    Non-mention tokens become top-level pointers; each mention becomes a
    begin-type token, its pointers, and an end-type token. The tag symbol is
    the mention's entity field and the description comes from the type name.
    """
    utterance = tokenize_utterance(example.context)
    starts: list[int] = []
    ends: list[int] = []
    pos = 0
    for token in utterance.tokens:
        pos = example.context.index(token, pos)
        starts.append(pos)
        ends.append(pos + len(token))
        pos += len(token)

    tokens: list[TargetToken] = []
    tags: dict[tuple[str, str], ConceptTag] = {}
    cursor = 0
    for mention in sorted(example.mentions, key=lambda m: m.start):
        if mention.start not in starts or mention.end not in ends:
            raise SpanAlignmentError(
                f"mention span ({mention.start}, {mention.end}) does not align to "
                f"token boundaries of {example.context!r}")
        first = starts.index(mention.start)
        last = ends.index(mention.end)
        if first < cursor:
            raise SpanAlignmentError(
                f"mention span ({mention.start}, {mention.end}) overlaps a previous mention")
        tokens.extend(Pointer(i) for i in range(cursor, first))
        begin = make_tag(mention.entity, "open-type", "begin", type_text=mention.type_name)
        end = make_tag(mention.entity, "open-type", "end", type_text=mention.type_name)
        for tag in (begin, end):
            tags.setdefault((tag.name, tag.boundary), tag)
        tokens.append(Concept(begin))
        tokens.extend(Pointer(i) for i in range(first, last + 1))
        tokens.append(Concept(end))
        cursor = last + 1
    tokens.extend(Pointer(i) for i in range(cursor, len(utterance.tokens)))
    return utterance, TargetSequence(tokens=tuple(tokens)), list(tags.values())


@dataclass(frozen=True)
class PretrainRecord:
    """A flat tagging example for concept pretraining (no tree form)."""

    utterance: Utterance
    target: TargetSequence
    tags: tuple[ConceptTag, ...]


def wiki_pretrain_records(examples: Sequence[WikiExample]) -> list[PretrainRecord]:
    """Convert wiki sentences to pretraining records, skipping unalignable ones."""
    records: list[PretrainRecord] = []
    skipped = 0
    for example in examples:
        try:
            utterance, target, tags = wikiwiki_to_parse_example(example)
        except (SpanAlignmentError, ConceptParseError):
            skipped += 1
            continue
        records.append(PretrainRecord(utterance=utterance, target=target,
                                      tags=tuple(tags)))
    if skipped:
        log.info("dropped %d unalignable wiki sentences", skipped)
    return records


def tags_from_records(records: Sequence[DatasetRecord]) -> list[ConceptTag]:
    """Begin/end concept tokens for every label in a record set, sorted."""
    from .parse import build_concept_tags

    labels: set = set()
    for record in records:
        labels.update(tree_labels(record.tree))
    return build_concept_tags(labels)


# content fingerprints, used by run manifests to prove split hygiene

def record_canonical_json(record: DatasetRecord) -> str:
    """Stable one-line JSON identity of a record."""
    return json.dumps(
        {"domain": record.domain, "utterance": record.utterance.raw,
         "target": record.target.token_strings()},
        sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def record_fingerprint(record: DatasetRecord) -> str:
    return hashlib.sha256(record_canonical_json(record).encode("utf-8")).hexdigest()


def corpus_fingerprint(records: Iterable[DatasetRecord]) -> dict:
    """Order-independent digest of a record set."""
    hashes = sorted(record_fingerprint(r) for r in records)
    digest = hashlib.sha256("\n".join(hashes).encode("ascii")).hexdigest()
    return {"count": len(hashes), "digest": digest}


# SNIPS-style flat corpora convert to the same TSV the main loader reads

def _snips_label(name: str) -> str:
    words = re.findall(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+", name)
    return "_".join(w.upper() for w in words) if words else name.upper()


def snips_to_rows(payload: dict) -> list[tuple[str, str, str]]:
    """Convert a SNIPS-format intent file into (domain, utterance, semantic_parse) rows.

    Each intent becomes its own domain with a single-intent tree over flat
    slots; entity fragments must align to whitespace token boundaries.
    """
    rows: list[tuple[str, str, str]] = []
    for intent_name, entries in payload.items():
        intent = f"IN:{_snips_label(intent_name)}"
        for entry in entries:
            words: list[str] = []
            children: list[Union[ParseTree, int]] = []
            for fragment in entry["data"]:
                fragment_words = fragment["text"].split()
                indices = list(range(len(words), len(words) + len(fragment_words)))
                words.extend(fragment_words)
                if not fragment_words:
                    continue
                if "entity" in fragment:
                    slot = f"SL:{_snips_label(fragment['entity'])}"
                    children.append(ParseTree(name=slot, kind="slot",
                                              children=tuple(indices)))
                else:
                    children.extend(indices)
            if not words:
                continue
            utterance = tokenize_utterance(" ".join(words))
            tree = ParseTree(name=intent, kind="intent", children=tuple(children))
            rows.append((_snips_label(intent_name).lower(), utterance.raw,
                         to_seqlogical(tree, utterance)))
    return rows


def load_corpus(path: Union[str, Path]) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Load (train, test) record lists from a corpus path.

    A directory must contain ``train.tsv`` and ``test.tsv`` (optionally
    gzipped). A single TSV file is carved into disjoint per-domain train and
    test pools with a fixed seed.
    """
    path = Path(path)
    if path.is_dir():
        train_path = _first_existing(path, "train.tsv", "train.tsv.gz")
        test_path = _first_existing(path, "test.tsv", "test.tsv.gz")
        train, _ = load_topv2_tsv(train_path)
        test, _ = load_topv2_tsv(test_path)
        return train, test
    records, _ = load_topv2_tsv(path)
    return carve_test_split(records)


def _first_existing(directory: Path, *names: str) -> Path:
    for name in names:
        candidate = directory / name
        if candidate.exists():
            return candidate
    raise DataError(f"{directory}: none of {names} found")


def carve_test_split(records: Sequence[DatasetRecord], fraction: float = 0.2,
                     seed: int = 9_173) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Deterministic per-domain train/test carve for single-file corpora."""
    train: list[DatasetRecord] = []
    test: list[DatasetRecord] = []
    domains = sorted({r.domain for r in records})
    for index, domain in enumerate(domains):
        domain_records = [r for r in records if r.domain == domain]
        rng = np.random.default_rng([seed, index])
        order = rng.permutation(len(domain_records))
        n_test = max(1, round(fraction * len(domain_records))) \
            if len(domain_records) > 1 else 0
        test_positions = set(order[:n_test].tolist())
        for pos, record in enumerate(domain_records):
            (test if pos in test_positions else train).append(record)
    return train, test
