"""Shared fixtures for model-level tests."""

from concept_parse.data import record_from_row, tags_from_records
from concept_parse.model import ConceptModel, ModelConfig, build_vocabularies


def records_from_rows(rows):
    return [record_from_row(*row) for row in rows]


def build_model(records, tags=None, wiki_records=(), seed=0, **config_kwargs):
    """A model whose vocabularies cover the given records and pretraining data."""
    tags = tags if tags is not None else tags_from_records(records)
    token_sequences = [r.utterance.tokens for r in records]
    token_sequences += [r.utterance.tokens for r in wiki_records]
    descriptions = [t.description for t in tags]
    descriptions += [t.description for r in wiki_records for t in r.tags]
    source_vocab, concept_vocab = build_vocabularies(token_sequences, descriptions)
    config = ModelConfig(**config_kwargs)
    return ConceptModel(config, source_vocab, concept_vocab, seed=seed)


TINY = dict(width=32, encoder_layers=1, encoder_heads=2, decoder_layers=1,
            decoder_heads=2, concept_layers=1, concept_heads=2,
            max_source_len=32, max_target_len=48, ff_width=64)
