"""Shared test helpers: synthetic instances, parses, corpora, and providers.

The synthetic corpus is designed so that hash-backend embeddings carry real
signal: instances sharing a (relation, entity-pair) combination render
byte-identical dependency-path patterns — hence identical vectors and cosine
1.0 — while their full sentences stay unique per instance.  Nearest-neighbour
behaviour is therefore exactly predictable without any trained encoder.
"""

from __future__ import annotations

from collections import deque

import numpy as np
import pytest

from pkre.corpus import ROOT_HEAD, DependencyParse, Instance, ParsedInstance
from pkre.embeddings import EmbeddingProvider, ProviderConfig

DIM = 32


@pytest.fixture
def provider() -> EmbeddingProvider:
    return EmbeddingProvider(ProviderConfig(backend="hash", dimension=DIM))


def make_instance(
    ident: str = "i1",
    tokens=("Acme", "bought", "Beta"),
    e1=(0, 1),
    e2=(2, 3),
    e1_type: str = "ORG",
    e2_type: str = "ORG",
    label: str = "acquired_by",
    split: str = "train",
) -> Instance:
    return Instance(
        id=ident,
        tokens=tuple(tokens),
        e1_span=tuple(e1),
        e2_span=tuple(e2),
        e1_type=e1_type,
        e2_type=e2_type,
        gold_label=label,
        split=split,
    )


def chain_parse(n: int, labels=None) -> DependencyParse:
    """A chain tree 0 <- 1 <- ... with the last token as root."""
    heads = tuple(range(1, n)) + (ROOT_HEAD,)
    return DependencyParse(heads, tuple(labels) if labels else ("dep",) * n)


def bfs_path(heads, a: int, b: int) -> list[int] | None:
    """Independent oracle: breadth-first search over undirected head links."""
    n = len(heads)
    adjacency: list[list[int]] = [[] for _ in range(n)]
    for child, head in enumerate(heads):
        if head != ROOT_HEAD and 0 <= head < n:
            adjacency[child].append(head)
            adjacency[head].append(child)
    previous: dict[int, int | None] = {a: None}
    frontier = deque([a])
    while frontier:
        node = frontier.popleft()
        if node == b:
            break
        for neighbour in adjacency[node]:
            if neighbour not in previous:
                previous[neighbour] = node
                frontier.append(neighbour)
    if b not in previous:
        return None
    path = []
    node: int | None = b
    while node is not None:
        path.append(node)
        node = previous[node]
    return path[::-1]


def random_tree(rng: np.random.Generator, n: int) -> DependencyParse:
    """A random rooted tree over ``n`` tokens with shuffled node ids."""
    parents = [ROOT_HEAD] + [int(rng.integers(0, i)) for i in range(1, n)]
    relabel = rng.permutation(n)
    heads = [0] * n
    for node, parent in enumerate(parents):
        heads[int(relabel[node])] = ROOT_HEAD if parent == ROOT_HEAD else int(relabel[parent])
    return DependencyParse(tuple(heads), tuple(f"dep{i}" for i in range(n)))


# Five tokens: entity, relation marker, pair marker, entity, off-path tail.
_HEADS = (1, ROOT_HEAD, 1, 2, 3)
_DEPS = ("nsubj", "root", "obj", "nmod", "dep")


def labeled_instance(
    ident: str,
    label: str,
    pair=("ORG", "PER"),
    split: str = "train",
    parse_failed: bool = False,
    ner=None,
) -> ParsedInstance:
    """A synthetic example whose dependency path encodes (label, pair).

    The path runs entity -> relation marker -> pair marker -> entity, so the
    rendered pattern is a pure function of (label, pair); the per-instance
    tail token hangs off the path so full sentences never collide.
    """
    tokens = (
        f"w{ident}a",
        f"rel_{label}",
        f"pair_{pair[0]}_{pair[1]}",
        f"w{ident}b",
        f"tail_{ident}",
    )
    instance = Instance(
        id=ident,
        tokens=tokens,
        e1_span=(0, 1),
        e2_span=(3, 4),
        e1_type=pair[0],
        e2_type=pair[1],
        gold_label=label,
        split=split,
    )
    parse = None if parse_failed else DependencyParse(_HEADS, _DEPS)
    return ParsedInstance(instance, parse, ner, parse_failed=parse_failed)


DEFAULT_SCHEMA = (
    ("acquired_by", ("ORG", "ORG")),
    ("employee_of", ("PER", "ORG")),
    ("no_relation", ("ORG", "ORG")),
)


def small_corpus(
    per_class: int = 3,
    dev_per_class: int = 1,
    schema=DEFAULT_SCHEMA,
) -> tuple[list[ParsedInstance], list[ParsedInstance]]:
    """Train/dev splits over a few (label, pair) combinations."""
    train, dev = [], []
    for label, pair in schema:
        stem = f"{label}_{pair[0]}{pair[1]}"
        for i in range(per_class):
            train.append(labeled_instance(f"tr_{stem}_{i}", label, pair))
        for i in range(dev_per_class):
            dev.append(labeled_instance(f"dv_{stem}_{i}", label, pair, split="dev"))
    return train, dev
