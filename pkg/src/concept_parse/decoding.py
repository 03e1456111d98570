"""Greedy and beam-search decoding over the dynamic m+n output space.

Generation stops when the bracket stack closes back to the top level, when an
end tag arrives with nothing open (an invalid but finished shape), or at the
model's maximum target length. Scoring is cumulative log-probability with no
length normalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .model import CompiledDomain, ConceptBank, ConceptModel, DecoderState, SourceEncoding
from .parse import Concept, Pointer, TargetSequence, TargetToken, Utterance


@dataclass(frozen=True)
class Hypothesis:
    """A (possibly finished) decoded prefix with its cumulative log-probability."""

    tokens: tuple[TargetToken, ...]
    log_prob: float
    finished: bool
    truncated: bool = False

    @property
    def sequence(self) -> TargetSequence:
        return TargetSequence(tokens=self.tokens)


@dataclass(frozen=True)
class _Beam:
    tokens: tuple[TargetToken, ...]
    log_prob: float
    state: DecoderState
    prev_embed: np.ndarray
    depth: int


def _token_at(index: int, bank: ConceptBank) -> TargetToken:
    if index < bank.m:
        return Concept(bank.tags[index])
    return Pointer(index - bank.m)


def _advance(depth: int, token: TargetToken) -> tuple[int, bool]:
    """New bracket depth and whether the sequence just finished structurally."""
    if isinstance(token, Pointer):
        return depth, False
    if token.tag.boundary == "begin":
        return depth + 1, False
    if depth <= 1:
        # closes the root, or an end tag with nothing open
        return 0, True
    return depth - 1, False


def beam_decode(model: ConceptModel, utterance: Utterance,
                domain: Union[CompiledDomain, ConceptBank], beam_width: int = 4,
                max_len: Optional[int] = None) -> list[Hypothesis]:
    """Length-unnormalized beam search; returns finished hypotheses, best first."""
    if beam_width < 1:
        raise ValueError("beam width must be at least 1")
    bank = domain.bank if isinstance(domain, CompiledDomain) else domain
    max_len = max_len or model.config.max_target_len
    src = model.encode_source(utterance.tokens)
    active = [_Beam(tokens=(), log_prob=0.0, state=model.initial_state(src),
                    prev_embed=model.bos_embedding(), depth=0)]
    pool: list[Hypothesis] = []
    while active:
        candidates: list[tuple[float, _Beam, int, DecoderState, np.ndarray]] = []
        for item in active:
            dist, state = model.decode_step(item.state, item.prev_embed, src, bank)
            for index, lp in enumerate(dist.log_probabilities):
                candidates.append((item.log_prob + float(lp), item, index, state,
                                   dist.log_probabilities))
        candidates.sort(key=lambda c: -c[0])
        active = []
        for log_prob, item, index, state, _ in candidates[:beam_width]:
            token = _token_at(index, bank)
            tokens = item.tokens + (token,)
            depth, finished = _advance(item.depth, token)
            if finished:
                pool.append(Hypothesis(tokens=tokens, log_prob=log_prob,
                                       finished=True))
            elif len(tokens) >= max_len:
                pool.append(Hypothesis(tokens=tokens, log_prob=log_prob,
                                       finished=True, truncated=True))
            else:
                active.append(_Beam(tokens=tokens, log_prob=log_prob, state=state,
                                    prev_embed=model.target_embed(token, bank),
                                    depth=depth))
    pool.sort(key=lambda h: -h.log_prob)
    return pool


def greedy_decode(model: ConceptModel, utterance: Utterance,
                  domain: Union[CompiledDomain, ConceptBank],
                  max_len: Optional[int] = None) -> Hypothesis:
    """Argmax decoding; agrees with beam_decode at width one."""
    bank = domain.bank if isinstance(domain, CompiledDomain) else domain
    max_len = max_len or model.config.max_target_len
    src = model.encode_source(utterance.tokens)
    state = model.initial_state(src)
    prev = model.bos_embedding()
    tokens: tuple[TargetToken, ...] = ()
    log_prob = 0.0
    depth = 0
    while True:
        dist, state = model.decode_step(state, prev, src, bank)
        index = dist.argmax()
        token = _token_at(index, bank)
        tokens = tokens + (token,)
        log_prob += float(dist.log_probabilities[index])
        depth, finished = _advance(depth, token)
        if finished:
            return Hypothesis(tokens=tokens, log_prob=log_prob, finished=True)
        if len(tokens) >= max_len:
            return Hypothesis(tokens=tokens, log_prob=log_prob, finished=True,
                              truncated=True)
        prev = model.target_embed(token, bank)
