"""Dependency-path extraction and pattern rendering.

A pattern is the space-joined rendering of the tokens on the shortest
dependency path between the two target entities, with entity tokens replaced
by their dataset types and, depending on the variant, NER-type substitution
for other tokens and/or a ``/label`` dependency suffix per token.  When no
usable parse exists, the original sentence itself serves as the pattern.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .corpus import ROOT_HEAD, DependencyParse, ParsedInstance


class PatternVariant(str, Enum):
    SDP = "sdp"
    SDP_NER = "sdp_ner"
    SDP_DEP = "sdp_dep"
    SDP_DEP_NER = "sdp_dep_ner"
    SENTENCE_FALLBACK = "sentence"

    @classmethod
    def from_name(cls, name: str) -> "PatternVariant":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(
                f"unknown pattern variant {name!r}; expected one of "
                f"{[v.value for v in cls]}"
            ) from None


#: The four dependency-path variants (everything except the sentence fallback).
SDP_VARIANTS: tuple[PatternVariant, ...] = (
    PatternVariant.SDP,
    PatternVariant.SDP_NER,
    PatternVariant.SDP_DEP,
    PatternVariant.SDP_DEP_NER,
)

_NER_VARIANTS = {PatternVariant.SDP_NER, PatternVariant.SDP_DEP_NER}
_DEP_VARIANTS = {PatternVariant.SDP_DEP, PatternVariant.SDP_DEP_NER}


class PathFailure(Exception):
    """No dependency path could be extracted; route the instance to fallback."""


@dataclass(frozen=True)
class Pattern:
    """A rendered pattern string for one instance under one variant."""

    instance_id: str
    variant: PatternVariant
    text: str
    path: tuple[int, ...]


def entity_head(parse: DependencyParse, span: tuple[int, int]) -> int:
    """Syntactic head token of a span: the token whose head lies outside it.

    Several external-headed tokens tie-break to the leftmost; a degenerate
    span whose tokens all attach internally yields the leftmost token.
    """
    start, end = span
    for index in range(start, end):
        head = parse.heads[index]
        if head == ROOT_HEAD or not start <= head < end:
            return index
    return start


def shortest_dep_path(parse: DependencyParse, a: int, b: int) -> list[int]:
    """The unique undirected tree path from ``a`` to ``b``, inclusive.

    Walks both tokens' ancestor chains and joins them at the lowest common
    ancestor.  Cycles or a forest (several roots) raise :class:`PathFailure`.
    """
    n = parse.token_count
    if not (0 <= a < n and 0 <= b < n):
        raise ValueError(f"token index out of range (n={n}, a={a}, b={b})")

    def climb(start: int) -> list[int]:
        chain = [start]
        node = start
        while parse.heads[node] != ROOT_HEAD:
            node = parse.heads[node]
            if not 0 <= node < n:
                raise PathFailure(f"head index {node} out of range")
            chain.append(node)
            if len(chain) > n:
                raise PathFailure("cycle in head links")
        return chain

    up_a = climb(a)
    depth_a = {node: depth for depth, node in enumerate(up_a)}
    up_b = []
    node = b
    while node not in depth_a:
        up_b.append(node)
        head = parse.heads[node]
        if head == ROOT_HEAD:
            raise PathFailure("tokens lie in disconnected components")
        node = head
        if len(up_b) > n:
            raise PathFailure("cycle in head links")
    return up_a[: depth_a[node] + 1] + up_b[::-1]


def _in_span(index: int, span: tuple[int, int]) -> bool:
    return span[0] <= index < span[1]


def _render_token(
    pi: ParsedInstance,
    index: int,
    variant: PatternVariant,
    substitute_targets_in_plain: bool,
) -> str:
    inst = pi.instance
    substitute = variant is not PatternVariant.SDP or substitute_targets_in_plain
    if substitute and _in_span(index, inst.e1_span):
        text = inst.e1_type
    elif substitute and _in_span(index, inst.e2_span):
        text = inst.e2_type
    elif (
        variant in _NER_VARIANTS
        and pi.ner is not None
        and pi.ner[index]
        and not _in_span(index, inst.e1_span)
        and not _in_span(index, inst.e2_span)
    ):
        text = pi.ner[index]  # type: ignore[assignment]
    else:
        text = inst.tokens[index]
    if variant in _DEP_VARIANTS:
        text = f"{text}/{pi.parse.labels[index]}"  # type: ignore[union-attr]
    return text


def render_pattern(
    pi: ParsedInstance,
    variant: PatternVariant,
    substitute_targets_in_plain: bool = True,
) -> Pattern:
    """Render one pattern variant for a parsed instance.

    Path token order runs from the e1 head to the e2 head.  Target-entity
    tokens render as their dataset entity type in every path variant (the
    plain variant's substitution can be switched off); the sentence fallback
    renders the original sentence verbatim.
    """
    inst = pi.instance
    if variant is PatternVariant.SENTENCE_FALLBACK:
        return Pattern(inst.id, variant, inst.sentence, ())
    if pi.parse_failed or pi.parse is None:
        raise PathFailure(f"instance {inst.id} has no usable parse")
    a = entity_head(pi.parse, inst.e1_span)
    b = entity_head(pi.parse, inst.e2_span)
    path = shortest_dep_path(pi.parse, a, b)
    words = [_render_token(pi, i, variant, substitute_targets_in_plain) for i in path]
    return Pattern(inst.id, variant, " ".join(words), tuple(path))


def generate_patterns(
    pi: ParsedInstance,
    variants: Sequence[PatternVariant] = SDP_VARIANTS,
    substitute_targets_in_plain: bool = True,
) -> list[Pattern]:
    """All requested path patterns (when parsing succeeded) plus the fallback."""
    patterns: list[Pattern] = []
    if not pi.parse_failed:
        for variant in variants:
            if variant is PatternVariant.SENTENCE_FALLBACK:
                continue
            patterns.append(render_pattern(pi, variant, substitute_targets_in_plain))
    patterns.append(render_pattern(pi, PatternVariant.SENTENCE_FALLBACK))
    return patterns
