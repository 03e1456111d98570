"""Parse trees, pointer linearization, target validation, and tag naturalization.

A parse is represented two ways: as a :class:`ParseTree` over utterance token
indices, and as a :class:`TargetSequence` of pointer tokens and begin/end
concept tokens. ``linearize`` and ``delinearize`` convert between the two and
are exact inverses on valid inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal, Optional, Union

from .errors import (
    EmptyUtteranceError,
    MalformedAnnotationError,
    MalformedTargetError,
    PointerRangeError,
    UnknownTagFormatError,
)

Kind = Literal["intent", "slot", "open-type"]
Boundary = Literal["begin", "end"]

_KIND_WORD = {"intent": "intent", "slot": "slot"}


@dataclass(frozen=True)
class Utterance:
    """A whitespace-tokenized source utterance."""

    tokens: tuple[str, ...]
    raw: str

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ConceptTag:
    """One output-vocabulary concept token: a tag name at one boundary.

    Begin and end boundaries of the same label are distinct concept tokens
    with distinct descriptions.
    """

    name: str
    kind: Kind
    boundary: Boundary
    description: str

    @property
    def token_string(self) -> str:
        return f"[{self.name}" if self.boundary == "begin" else f"{self.name}]"


@dataclass(frozen=True)
class Pointer:
    """Target token referencing the i-th source token."""

    index: int

    @property
    def token_string(self) -> str:
        return f"@ptr_{self.index}"


@dataclass(frozen=True, eq=False)
class Concept:
    """Target token carrying a concept tag.

    Token identity is the (name, boundary) symbol; the description is bank
    metadata and does not participate in equality.
    """

    tag: ConceptTag

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, Concept)
                and self.tag.name == other.tag.name
                and self.tag.boundary == other.tag.boundary)

    def __hash__(self) -> int:
        return hash((self.tag.name, self.tag.boundary))

    @property
    def token_string(self) -> str:
        return self.tag.token_string


TargetToken = Union[Pointer, Concept]


@dataclass(frozen=True)
class ParseTree:
    """Labeled tree over utterance token indices.

    ``children`` holds subtrees and integer token indices in surface order.
    """

    name: str
    kind: Kind
    children: tuple[Union["ParseTree", int], ...]

    def leaf_indices(self) -> list[int]:
        """Token indices of this subtree in left-to-right order."""
        out: list[int] = []
        for child in self.children:
            if isinstance(child, ParseTree):
                out.extend(child.leaf_indices())
            else:
                out.append(child)
        return out


@dataclass(frozen=True)
class TargetSequence:
    """Linearized parse: pointers plus begin/end concept tokens."""

    tokens: tuple[TargetToken, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def token_strings(self) -> list[str]:
        return [t.token_string for t in self.tokens]


@dataclass(frozen=True)
class ValidationReport:
    """Well-formedness verdict for a target sequence.

    ``error`` is one of ``unbalanced``, ``name-mismatch``, ``pointer-range``
    and ``position`` is the first offending token index (``len(seq)`` for a
    sequence that ends with open tags).
    """

    valid: bool
    error: Optional[str] = None
    position: Optional[int] = None


def tokenize_utterance(raw: str) -> Utterance:
    """Split a raw utterance into maximal non-whitespace runs."""
    tokens = tuple(raw.split())
    if not tokens:
        raise EmptyUtteranceError("utterance contains no tokens")
    return Utterance(tokens=tokens, raw=raw)


def split_tag_token(token: str) -> tuple[str, Kind, Boundary]:
    """Decompose a tag token string into (name, kind, boundary)."""
    if token.startswith("[") and len(token) > 1:
        name, boundary = token[1:], "begin"
    elif token.endswith("]") and len(token) > 1:
        name, boundary = token[:-1], "end"
    else:
        raise UnknownTagFormatError(f"not a tag token: {token!r}")
    if name.startswith("IN:") and len(name) > 3:
        kind: Kind = "intent"
    elif name.startswith("SL:") and len(name) > 3:
        kind = "slot"
    elif name and "[" not in name and "]" not in name:
        kind = "open-type"
    else:
        raise UnknownTagFormatError(f"malformed tag name in token: {token!r}")
    return name, kind, boundary


def naturalize_tag(token: str, type_text: Optional[str] = None) -> str:
    """Render a tag token as its lowercase natural-language description.

    Intent/slot tokens become "<boundary> <name words> <kind>"; open-type
    tokens require ``type_text`` and become "<boundary> <type text>".
    """
    name, kind, boundary = split_tag_token(token)
    if kind == "open-type":
        if not type_text or not type_text.strip():
            raise UnknownTagFormatError(
                f"open-type token {token!r} requires accompanying type text"
            )
        body = " ".join(type_text.lower().split())
    else:
        body = f"{name[3:].lower().replace('_', ' ')} {_KIND_WORD[kind]}"
    return f"{boundary} {body}"


def make_tag(name: str, kind: Kind, boundary: Boundary,
             type_text: Optional[str] = None) -> ConceptTag:
    """Build a ConceptTag with its naturalized description.

    Open-type tags without accompanying type text fall back to describing
    the name itself, so construction is total for every tag kind.
    """
    if kind == "open-type" and type_text is None:
        type_text = name.lower().replace("_", " ")
    token = f"[{name}" if boundary == "begin" else f"{name}]"
    return ConceptTag(
        name=name,
        kind=kind,
        boundary=boundary,
        description=naturalize_tag(token, type_text=type_text),
    )


def tags_for_label(name: str, kind: Kind,
                   type_text: Optional[str] = None) -> tuple[ConceptTag, ConceptTag]:
    """Begin and end concept tokens for one boundary-free label."""
    return (
        make_tag(name, kind, "begin", type_text=type_text),
        make_tag(name, kind, "end", type_text=type_text),
    )


def build_concept_tags(labels: Iterable[tuple[str, Kind]],
                       type_texts: Optional[dict[str, str]] = None) -> list[ConceptTag]:
    """Begin/end tags for a set of labels, in deterministic (name, begin, end) order."""
    type_texts = type_texts or {}
    tags: list[ConceptTag] = []
    for name, kind in sorted(set(labels)):
        tags.extend(tags_for_label(name, kind, type_text=type_texts.get(name)))
    return tags


def parse_seqlogical(annotation: str, utterance: Utterance) -> ParseTree:
    """Parse a bracketed seqlogical annotation against its utterance.

    The annotation interleaves ``[IN:NAME`` / ``[SL:NAME`` openers, plain
    words, and bare ``]`` closers; words must match the utterance tokens in
    order and map to their positions.
    """
    items = annotation.split()
    # stack of (name, kind, children) frames
    stack: list[tuple[str, Kind, list[Union[ParseTree, int]]]] = []
    root: Optional[ParseTree] = None
    cursor = 0
    for item in items:
        if item == "]":
            if not stack:
                raise MalformedAnnotationError("unbalanced ']' in annotation")
            name, kind, children = stack.pop()
            node = ParseTree(name=name, kind=kind, children=tuple(children))
            if stack:
                stack[-1][2].append(node)
            elif root is None:
                root = node
            else:
                raise MalformedAnnotationError("multiple root nodes in annotation")
        elif item.startswith("["):
            name, kind, _ = split_tag_token(item)
            if kind == "open-type":
                raise MalformedAnnotationError(f"unrecognized tag opener: {item!r}")
            if root is not None:
                raise MalformedAnnotationError("content after root closes")
            stack.append((name, kind, []))
        else:
            if not stack:
                raise MalformedAnnotationError(f"word {item!r} outside any tag")
            if cursor >= len(utterance.tokens):
                raise MalformedAnnotationError(
                    f"annotation has more words than the utterance: {item!r}"
                )
            if utterance.tokens[cursor] != item:
                raise MalformedAnnotationError(
                    f"word {item!r} does not match utterance token "
                    f"{utterance.tokens[cursor]!r} at position {cursor}"
                )
            stack[-1][2].append(cursor)
            cursor += 1
    if stack:
        raise MalformedAnnotationError("annotation ends with unclosed tags")
    if root is None:
        raise MalformedAnnotationError("annotation contains no tags")
    if cursor != len(utterance.tokens):
        raise MalformedAnnotationError(
            f"annotation covers {cursor} of {len(utterance.tokens)} utterance tokens"
        )
    if root.kind != "intent":
        raise MalformedAnnotationError(f"root tag {root.name!r} is not an intent")
    return root


def linearize(tree: ParseTree, utterance: Utterance) -> TargetSequence:
    """Depth-first emission: begin tag, children (indices as pointers), end tag."""
    n = len(utterance.tokens)
    out: list[TargetToken] = []

    def emit(node: ParseTree) -> None:
        begin, end = tags_for_label(node.name, node.kind)
        out.append(Concept(begin))
        for child in node.children:
            if isinstance(child, ParseTree):
                emit(child)
            else:
                if not 0 <= child < n:
                    raise PointerRangeError(
                        f"leaf index {child} out of range for {n} source tokens"
                    )
                out.append(Pointer(child))
        out.append(Concept(end))

    emit(tree)
    return TargetSequence(tokens=tuple(out))


def delinearize(seq: TargetSequence, utterance: Utterance) -> ParseTree:
    """Rebuild the parse tree from a target sequence; inverse of linearize."""
    n = len(utterance.tokens)
    stack: list[tuple[ConceptTag, list[Union[ParseTree, int]]]] = []
    root: Optional[ParseTree] = None
    for pos, token in enumerate(seq.tokens):
        if root is not None:
            raise MalformedTargetError("tokens after the root closes", pos)
        if isinstance(token, Pointer):
            if not 0 <= token.index < n:
                raise MalformedTargetError(
                    f"pointer @ptr_{token.index} out of range for {n} source tokens", pos
                )
            if not stack:
                raise MalformedTargetError("pointer outside any tag", pos)
            stack[-1][1].append(token.index)
        elif token.tag.boundary == "begin":
            stack.append((token.tag, []))
        else:
            if not stack:
                raise MalformedTargetError(
                    f"end tag {token.tag.name!r} with no open tag", pos
                )
            open_tag, children = stack.pop()
            if open_tag.name != token.tag.name:
                raise MalformedTargetError(
                    f"end tag {token.tag.name!r} does not match open tag "
                    f"{open_tag.name!r}", pos
                )
            node = ParseTree(name=open_tag.name, kind=open_tag.kind,
                             children=tuple(children))
            if stack:
                stack[-1][1].append(node)
            else:
                root = node
    if stack:
        raise MalformedTargetError("sequence ends with unclosed tags", len(seq.tokens))
    if root is None:
        raise MalformedTargetError("sequence contains no tags", 0)
    return root


def validate_target(seq: TargetSequence, n: int) -> ValidationReport:
    """Check bracket discipline and pointer ranges; never raises.

    Accepts flat tagging sequences with top-level pointers as well as
    single-root parses; ``delinearize`` is stricter and additionally requires
    a single root region.
    """
    stack: list[str] = []
    for pos, token in enumerate(seq.tokens):
        if isinstance(token, Pointer):
            if not 0 <= token.index < n:
                return ValidationReport(False, "pointer-range", pos)
        elif token.tag.boundary == "begin":
            stack.append(token.tag.name)
        else:
            if not stack:
                return ValidationReport(False, "unbalanced", pos)
            if stack[-1] != token.tag.name:
                return ValidationReport(False, "name-mismatch", pos)
            stack.pop()
    if stack:
        return ValidationReport(False, "unbalanced", len(seq.tokens))
    return ValidationReport(True)


def to_seqlogical(tree: ParseTree, utterance: Utterance) -> str:
    """Serialize a tree to the bracketed annotation format; inverse of parse_seqlogical."""
    n = len(utterance.tokens)
    parts: list[str] = []

    def emit(node: ParseTree) -> None:
        parts.append(f"[{node.name}")
        for child in node.children:
            if isinstance(child, ParseTree):
                emit(child)
            else:
                if not 0 <= child < n:
                    raise PointerRangeError(
                        f"leaf index {child} out of range for {n} source tokens"
                    )
                parts.append(utterance.tokens[child])
        parts.append("]")

    emit(tree)
    return " ".join(parts)


Span = tuple[str, Optional[int], Optional[int]]


def extract_labeled_spans(tree: ParseTree) -> set[Span]:
    """One (label, start, end) triple per tree node.

    The span covers the node's min/max token leaf indices, inclusive; nodes
    with no token leaves yield a (label, None, None) sentinel.
    """
    spans: set[Span] = set()

    def walk(node: ParseTree) -> None:
        leaves = node.leaf_indices()
        if leaves:
            spans.add((node.name, min(leaves), max(leaves)))
        else:
            spans.add((node.name, None, None))
        for child in node.children:
            if isinstance(child, ParseTree):
                walk(child)

    walk(tree)
    return spans


def token_from_string(s: str, tags_by_token: Optional[dict[str, ConceptTag]] = None,
                      type_texts: Optional[dict[str, str]] = None) -> TargetToken:
    """Parse one serialized target token.

    Known tags can be supplied via ``tags_by_token`` (keyed by token string)
    to preserve their descriptions; otherwise the description is derived by
    naturalization, using ``type_texts`` for open-type names.
    """
    if s.startswith("@ptr_"):
        try:
            return Pointer(int(s[5:]))
        except ValueError as exc:
            raise UnknownTagFormatError(f"malformed pointer token: {s!r}") from exc
    if tags_by_token is not None and s in tags_by_token:
        return Concept(tags_by_token[s])
    name, kind, boundary = split_tag_token(s)
    type_text = (type_texts or {}).get(name)
    return Concept(make_tag(name, kind, boundary, type_text=type_text))


def sequence_from_strings(strings: Iterable[str],
                          tags_by_token: Optional[dict[str, ConceptTag]] = None,
                          type_texts: Optional[dict[str, str]] = None) -> TargetSequence:
    """Parse a list of serialized target tokens into a TargetSequence."""
    return TargetSequence(tokens=tuple(
        token_from_string(s, tags_by_token=tags_by_token, type_texts=type_texts)
        for s in strings
    ))


def tree_labels(tree: ParseTree) -> set[tuple[str, Kind]]:
    """Distinct (name, kind) labels appearing anywhere in the tree."""
    labels: set[tuple[str, Kind]] = set()

    def walk(node: ParseTree) -> None:
        labels.add((node.name, node.kind))
        for child in node.children:
            if isinstance(child, ParseTree):
                walk(child)

    walk(tree)
    return labels
