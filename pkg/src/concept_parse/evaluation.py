"""Metrics: exact match, labeled-span F1, teacher-forced accuracy, and domain evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .data import DatasetRecord
from .decoding import beam_decode
from .errors import EmptyEvalSetError, MalformedTargetError
from .model import CompiledDomain, ConceptBank, ConceptModel
from .parse import (
    ConceptTag,
    ParseTree,
    TargetSequence,
    delinearize,
    extract_labeled_spans,
)

log = logging.getLogger(__name__)


def exact_match(pred: TargetSequence, gold: TargetSequence) -> int:
    """1 iff the token sequences are identical; anything else scores 0."""
    return int(pred == gold)


@dataclass(frozen=True)
class SpanCounts:
    """Micro-F1 accumulator entries for one prediction/gold pair."""

    matched: int
    predicted: int
    gold: int


def span_counts(pred_tree: Optional[ParseTree], gold_tree: ParseTree) -> SpanCounts:
    """Matched/predicted/gold labeled-span counts; invalid predictions predict nothing."""
    gold_spans = extract_labeled_spans(gold_tree)
    if pred_tree is None:
        return SpanCounts(matched=0, predicted=0, gold=len(gold_spans))
    pred_spans = extract_labeled_spans(pred_tree)
    return SpanCounts(matched=len(pred_spans & gold_spans),
                      predicted=len(pred_spans), gold=len(gold_spans))


def labeled_span_f1(pairs: Sequence[tuple[Optional[ParseTree], ParseTree]]
                    ) -> tuple[float, float, float]:
    """Micro-averaged precision, recall, F1 (percent) over (label, start, end) triples."""
    matched = predicted = gold = 0
    for pred_tree, gold_tree in pairs:
        counts = span_counts(pred_tree, gold_tree)
        matched += counts.matched
        predicted += counts.predicted
        gold += counts.gold
    precision = matched / predicted if predicted else 0.0
    recall = matched / gold if gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision * 100.0, recall * 100.0, f1 * 100.0


def _resolve_bank(model: ConceptModel,
                  bank: Union[Sequence[ConceptTag], ConceptBank, CompiledDomain]
                  ) -> ConceptBank:
    if isinstance(bank, CompiledDomain):
        return bank.bank
    if isinstance(bank, ConceptBank):
        return bank
    return model.encode_concepts(list(bank))


def teacher_forced_accuracy(model: ConceptModel, records: Sequence[DatasetRecord],
                            bank: Union[Sequence[ConceptTag], ConceptBank, CompiledDomain],
                            chunk_size: int = 64) -> float:
    """Percent of records whose argmax equals gold at every teacher-forced step.

    Runs the batched forward only; no search of any kind is involved.
    """
    if not records:
        raise EmptyEvalSetError("teacher-forced accuracy over an empty record set")
    resolved = _resolve_bank(model, bank)
    tags = list(resolved.tags)
    correct = 0
    with ad.no_grad():
        bank_tensor = ad.constant(resolved.vectors)
        for start in range(0, len(records), chunk_size):
            chunk = records[start:start + chunk_size]
            batch = model.build_batch(chunk, tags)
            log_probs = model.teacher_log_probs(batch, bank_tensor).data
            hits = (np.argmax(log_probs, axis=-1) == batch.gold) | \
                (batch.tgt_mask == 0.0)
            correct += int(hits.all(axis=1).sum())
    return 100.0 * correct / len(records)


@dataclass
class EvalReport:
    """Aggregate decoding metrics for one domain."""

    em: float
    f1: float
    precision: float
    recall: float
    validity: float
    count: int
    matched_spans: int
    predicted_spans: int
    gold_spans: int
    outcomes: list[dict] = field(default_factory=list)

    def metrics(self) -> dict:
        return {"em": self.em, "f1": self.f1, "precision": self.precision,
                "recall": self.recall, "validity": self.validity}

    def write_outcomes(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for outcome in self.outcomes:
                handle.write(json.dumps(outcome, sort_keys=True) + "\n")

    def summary_json(self) -> str:
        payload = dict(self.metrics(), count=self.count)
        return json.dumps(payload, sort_keys=True, indent=2)


def evaluate_domain(model: ConceptModel, domain: CompiledDomain,
                    records: Sequence[DatasetRecord], beam_width: int = 4
                    ) -> EvalReport:
    """Beam-decode every record and aggregate EM, micro-F1, and validity."""
    if not records:
        raise EmptyEvalSetError("evaluation needs at least one record")
    em_total = 0
    valid_total = 0
    matched = predicted = gold = 0
    outcomes: list[dict] = []
    for record in records:
        hypotheses = beam_decode(model, record.utterance, domain,
                                 beam_width=beam_width)
        pred = hypotheses[0].sequence
        em = exact_match(pred, record.target)
        try:
            pred_tree: Optional[ParseTree] = delinearize(pred, record.utterance)
        except MalformedTargetError:
            pred_tree = None
        counts = span_counts(pred_tree, record.tree)
        em_total += em
        valid_total += int(pred_tree is not None)
        matched += counts.matched
        predicted += counts.predicted
        gold += counts.gold
        outcomes.append({
            "utterance": record.utterance.raw,
            "gold": record.target.token_strings(),
            "pred": pred.token_strings(),
            "em": em,
            "f1_counts": [counts.matched, counts.predicted, counts.gold],
            "valid": pred_tree is not None,
        })
    precision = matched / predicted if predicted else 0.0
    recall = matched / gold if gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    report = EvalReport(
        em=100.0 * em_total / len(records),
        f1=f1 * 100.0,
        precision=precision * 100.0,
        recall=recall * 100.0,
        validity=100.0 * valid_total / len(records),
        count=len(records),
        matched_spans=matched,
        predicted_spans=predicted,
        gold_spans=gold,
        outcomes=outcomes,
    )
    log.info("evaluated %d records: EM %.2f F1 %.2f validity %.2f",
             report.count, report.em, report.f1, report.validity)
    return report
