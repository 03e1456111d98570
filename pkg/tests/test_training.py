"""Loss oracles, in-batch negatives, rehearsal identity, and loop behavior."""

import math

import numpy as np
import pytest

from concept_parse.data import (
    SpiConfig,
    build_leave_one_out,
    sample_spi,
    tags_from_records,
    wiki_pretrain_records,
    Mention,
    WikiExample,
    PretrainRecord,
)
from concept_parse.errors import EmptyFewShotError, SupportError
from concept_parse.model import ConceptBank, StepDistribution
from concept_parse.parse import (
    Concept,
    Pointer,
    TargetSequence,
    make_tag,
    tags_for_label,
)
from concept_parse.synthetic import transfer_pair_rows, two_domain_rows, wiki_payloads
from concept_parse.training import (
    TrainConfig,
    batch_concept_union,
    batch_cross_entropy,
    fewshot_finetune,
    fewshot_loss_values,
    make_batches,
    make_pretrain_batch,
    pretrain_step,
    pretrain_wikiwiki,
    train_known_domains,
    sequence_ce_loss,
)

from helpers import TINY, build_model, records_from_rows


def dist_from_probs(probs, m):
    probs = np.asarray(probs, dtype=np.float64)
    return StepDistribution(
        concept_scores=np.log(probs[:m]),
        pointer_scores=np.log(probs[m:]),
        probabilities=probs,
        log_probabilities=np.log(probs),
    )


def one_tag_bank():
    tag = make_tag("IN:A", "intent", "begin")
    return tag, ConceptBank(tags=(tag,), vectors=np.zeros((1, 4), dtype=np.float32))


class TestSequenceCeLoss:
    def test_certain_model_zero_loss(self):
        tag, bank = one_tag_bank()
        dists = [dist_from_probs([1.0 - 1e-15, 1e-15], m=1)]
        target = TargetSequence((Concept(tag),))
        assert sequence_ce_loss(dists, target, bank) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_gives_log_v(self):
        tag, bank = one_tag_bank()
        for n in (1, 3, 7):
            v = 1 + n
            dists = [dist_from_probs([1.0 / v] * v, m=1)]
            target = TargetSequence((Pointer(0),))
            assert sequence_ce_loss(dists, target, bank) == pytest.approx(math.log(v))

    def test_two_position_hand_value(self):
        tag, bank = one_tag_bank()
        dists = [dist_from_probs([0.5, 0.5], m=1),
                 dist_from_probs([0.75, 0.25], m=1)]
        target = TargetSequence((Concept(tag), Pointer(0)))
        expected = (math.log(2) + math.log(4)) / 2
        assert sequence_ce_loss(dists, target, bank) == pytest.approx(expected)
        assert expected == pytest.approx(1.0397, abs=1e-4)

    def test_count_mismatch(self):
        tag, bank = one_tag_bank()
        with pytest.raises(SupportError):
            sequence_ce_loss([], TargetSequence((Concept(tag),)), bank)

    def test_gold_outside_support(self):
        tag, bank = one_tag_bank()
        dists = [dist_from_probs([0.5, 0.5], m=1)]
        stranger = make_tag("IN:OTHER", "intent", "begin")
        with pytest.raises(SupportError):
            sequence_ce_loss(dists, TargetSequence((Concept(stranger),)), bank)


def wiki_records(count=24, seed=0):
    payloads = wiki_payloads(count=count, seed=seed)
    examples = []
    for payload in payloads:
        mentions = tuple(Mention(m["start"], m["end"], m["entity"], m["type"])
                         for m in payload["mentions"])
        # single-sentence payload pieces come from the loader in production
        from concept_parse.data import _split_sentences
        for offset, sentence in _split_sentences(payload["context"]):
            local = tuple(Mention(m.start - offset, m.end - offset, m.entity,
                                  m.type_name)
                          for m in mentions
                          if m.start >= offset and m.end <= offset + len(sentence))
            examples.append(WikiExample(context=sentence, mentions=local))
    return wiki_pretrain_records(examples)


class TestInBatchNegatives:
    def test_union_counts(self):
        records = wiki_records()
        two_tags = [r for r in records if len(r.tags) == 2]
        batch = make_pretrain_batch(two_tags[:1])
        assert len(batch.concept_union) == 2
        distinct = []
        seen = set()
        for record in records:
            names = {t.name for t in record.tags}
            if names and not (names & seen):
                distinct.append(record)
                seen |= names
            if len(distinct) == 2:
                break
        union = batch_concept_union(distinct)
        assert len(union) == 4

    def test_union_must_cover_targets(self):
        records = [r for r in wiki_records() if r.tags]
        with pytest.raises(ValueError):
            from concept_parse.training import PretrainBatch
            PretrainBatch(examples=(records[0],), concept_union=())

    def test_loss_equals_restricted_full_ce_exactly(self):
        records = [r for r in wiki_records() if r.tags]
        model = build_model([], wiki_records=records, seed=2, **TINY)
        cfg = TrainConfig(seed=2)
        rng = np.random.default_rng(0)
        for trial in range(6):
            picks = rng.choice(len(records), size=4, replace=False)
            batch = make_pretrain_batch([records[int(i)] for i in picks])
            union = list(batch.concept_union)
            expected = batch_cross_entropy(model, list(batch.examples), union)
            actual = pretrain_step(model, batch, lr=0.0, cfg=cfg)
            assert actual == expected  # same floating-point path

    def test_restriction_differs_from_full_bank(self):
        records = [r for r in wiki_records() if r.tags]
        model = build_model([], wiki_records=records, seed=3, **TINY)
        all_tags = batch_concept_union(records)
        batch = make_pretrain_batch(records[:2])
        if len(batch.concept_union) == len(all_tags):
            pytest.skip("fixture batch covered every tag")
        restricted = batch_cross_entropy(model, list(batch.examples),
                                         list(batch.concept_union))
        full = batch_cross_entropy(model, list(batch.examples), list(all_tags))
        assert restricted != full


class TestFewshotLoss:
    @pytest.mark.parametrize("multiplier", [0.0, 0.1, 1.0])
    def test_identity(self, multiplier):
        values = fewshot_loss_values(2.0, 1.0, multiplier)
        assert values.total == 2.0 + multiplier * 1.0

    def test_affine_in_multiplier(self):
        few, known = 1.7, 0.9
        at = {lam: fewshot_loss_values(few, known, lam).total for lam in (0.0, 0.1, 1.0)}
        assert at[0.0] == few
        slope = (at[1.0] - at[0.0]) / 1.0
        assert slope == pytest.approx(known, abs=1e-12)
        assert at[0.1] == pytest.approx(few + 0.1 * known, abs=1e-12)

    def test_default_multiplier(self):
        assert TrainConfig().rehearsal_multiplier == 0.1


class TestBatches:
    def test_deterministic_and_bucketed(self):
        records = records_from_rows(two_domain_rows(20, seed=0))
        one = make_batches(records, 8, np.random.default_rng(3))
        two = make_batches(records, 8, np.random.default_rng(3))
        assert one == two
        for batch in one:
            lengths = [len(r.target.tokens) for r in batch]
            assert max(lengths) - min(lengths) <= 4

    def test_all_records_used_once(self):
        records = records_from_rows(two_domain_rows(13, seed=1))
        batches = make_batches(records, 4, np.random.default_rng(0))
        flat = [r for batch in batches for r in batch]
        assert sorted(map(id, flat)) == sorted(map(id, records))


def quick_cfg(**kwargs):
    base = dict(batch_size=8, epochs=40, patience=5, learning_rate=2e-3, seed=1)
    base.update(kwargs)
    return TrainConfig(**base)


class TestTrainKnownDomains:
    def test_overfits_small_corpus(self):
        records = records_from_rows(two_domain_rows(12, seed=0))
        split = build_leave_one_out(records, [], "weather", valid_fraction=0.3)
        model = build_model(records, seed=1, width=48, ff_width=96,
                            encoder_layers=1, encoder_heads=2, decoder_layers=1,
                            decoder_heads=2, concept_layers=1, concept_heads=2,
                            max_source_len=32, max_target_len=48)
        result = train_known_domains(model, split,
                                     quick_cfg(epochs=220, learning_rate=3e-3,
                                               patience=220))
        assert result.best_score >= 90.0
        assert result.log[-1]["loss"] < result.log[0]["loss"]

    def test_bit_reproducible(self):
        records = records_from_rows(two_domain_rows(8, seed=0))
        split = build_leave_one_out(records, [], "weather", valid_fraction=0.3)

        def run():
            model = build_model(records, seed=4, **TINY)
            result = train_known_domains(model, split, quick_cfg(epochs=4, seed=9))
            blob = b"".join(p.data.tobytes()
                            for _, p in sorted(model.parameters().items()))
            return [e["loss"] for e in result.log], blob

        losses_a, blob_a = run()
        losses_b, blob_b = run()
        assert losses_a == losses_b
        assert blob_a == blob_b

    def test_frozen_lr_stops_after_patience(self):
        records = records_from_rows(two_domain_rows(8, seed=0))
        split = build_leave_one_out(records, [], "weather", valid_fraction=0.3)
        model = build_model(records, seed=1, **TINY)
        result = train_known_domains(
            model, split, quick_cfg(learning_rate=0.0, patience=1, epochs=50))
        assert result.stopped_early
        assert len(result.log) == 2  # first epoch improves over -inf, second stops

    def test_consumed_fingerprints_exclude_heldout(self):
        records = records_from_rows(two_domain_rows(10, seed=0))
        split = build_leave_one_out(records, [], "weather", valid_fraction=0.3)
        model = build_model(records, seed=1, **TINY)
        result = train_known_domains(model, split, quick_cfg(epochs=2))
        from concept_parse.data import record_fingerprint
        heldout = {record_fingerprint(r) for r in split.heldout_train}
        assert not (result.consumed_fingerprints & heldout)


class TestPretrainLoop:
    def test_epoch_cap_exact(self):
        records = wiki_records(count=10)
        model = build_model([], wiki_records=records, seed=0, **TINY)
        result = pretrain_wikiwiki(model, records, quick_cfg())
        assert len(result.log) == 2
        assert result.log[-1]["epoch"] == 1

    def test_empty_corpus_is_identity(self):
        model = build_model([], wiki_records=wiki_records(count=4), seed=0, **TINY)
        before = model.snapshot()
        pretrain_wikiwiki(model, [], quick_cfg())
        after = model.snapshot()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_loss_decreases(self):
        records = wiki_records(count=30)
        model = build_model([], wiki_records=records, seed=0, **TINY)
        result = pretrain_wikiwiki(model, records,
                                   quick_cfg(pretrain_epochs=6, learning_rate=2e-3))
        assert result.log[-1]["loss"] < result.log[0]["loss"]


class TestFewshotFinetune:
    def test_empty_subset_rejected(self):
        records = records_from_rows(two_domain_rows(6, seed=0))
        model = build_model(records, seed=0, **TINY)
        with pytest.raises(EmptyFewShotError):
            fewshot_finetune(model, [], records, quick_cfg())

    def test_smoke_improves_on_new_domain(self):
        records = records_from_rows(transfer_pair_rows(16, seed=0))
        alpha = [r for r in records if r.domain == "alpha"]
        beta = [r for r in records if r.domain == "beta"]
        model = build_model(records, seed=1, **TINY)
        split = build_leave_one_out(records, [], "beta", valid_fraction=0.25)
        train_known_domains(model, split, quick_cfg(epochs=40, learning_rate=3e-3))
        spi = sample_spi(beta, SpiConfig(k=1, seed=3))
        before = model.snapshot()
        cfg = quick_cfg(fewshot_epochs=80, fewshot_eval_every=20,
                        learning_rate=3e-3)
        result = fewshot_finetune(model, spi, alpha, cfg)
        assert result.best_score > 0.0
        changed = any(not np.array_equal(before[k], model.parameters()[k].data)
                      for k in before)
        assert changed

    def test_multiplier_zero_is_plain_finetuning(self):
        records = records_from_rows(two_domain_rows(6, seed=0))
        navigation = [r for r in records if r.domain == "navigation"]
        model = build_model(records, seed=1, **TINY)
        cfg = quick_cfg(rehearsal_multiplier=0.0, fewshot_epochs=4,
                        fewshot_eval_every=2)
        result = fewshot_finetune(model, navigation[:3], navigation[3:], cfg)
        assert all("few_loss" in e and e["loss"] == e["few_loss"]
                   for e in result.log)
