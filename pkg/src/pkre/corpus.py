"""Corpus loading and validation: instances, dependency parses, NER sidecars.

The canonical instance file is line-delimited JSON, one record per line:

    {"id": ..., "tokens": [...], "e1_start": i, "e1_end": j, "e1_type": ...,
     "e2_start": k, "e2_end": l, "e2_type": ..., "relation": ...}

Token indices are 0-based and end-exclusive.  Dependency parses arrive in a
CoNLL-U sidecar whose ``# sent_id = <instance id>`` comments key each
sentence; NER tags arrive in a JSON-lines sidecar ``{"id": ..., "tags":
[tag-or-null, ...]}``.  The engine never runs a parser or NER model itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

SPLITS = ("train", "dev", "public_test")
NO_RELATION = "no_relation"

#: Head value marking the root token of a dependency parse.
ROOT_HEAD = -1

_REQUIRED_FIELDS = (
    "id",
    "tokens",
    "e1_start",
    "e1_end",
    "e1_type",
    "e2_start",
    "e2_end",
    "e2_type",
    "relation",
)


class CorpusError(Exception):
    """Unreadable corpus file or structurally invalid sidecar data."""


class TokenCountMismatch(CorpusError):
    """Parser token count disagrees with the corpus tokenization."""


@dataclass(frozen=True)
class Instance:
    """One corpus example: a tokenized sentence with two typed entity spans."""

    id: str
    tokens: tuple[str, ...]
    e1_span: tuple[int, int]
    e2_span: tuple[int, int]
    e1_type: str
    e2_type: str
    gold_label: str
    split: str

    @property
    def sentence(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class DependencyParse:
    """Per-token head indices and dependency labels for one sentence.

    ``heads[i] == ROOT_HEAD`` marks the root.  A parse may be structurally
    broken (cycles, several roots); callers decide whether to reject it or
    route the instance to the sentence-fallback path.
    """

    heads: tuple[int, ...]
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.heads) != len(self.labels):
            raise CorpusError("heads and labels must have equal length")

    @property
    def token_count(self) -> int:
        return len(self.heads)

    def is_tree(self) -> bool:
        """True iff the head links form a single rooted tree."""
        n = self.token_count
        if n == 0:
            return False
        roots = [i for i, h in enumerate(self.heads) if h == ROOT_HEAD]
        if len(roots) != 1:
            return False
        if any(h != ROOT_HEAD and not 0 <= h < n for h in self.heads):
            return False
        for start in range(n):
            node, steps = start, 0
            while self.heads[node] != ROOT_HEAD:
                node = self.heads[node]
                steps += 1
                if steps > n:  # cycle
                    return False
        return True


class EntityPairType(NamedTuple):
    """Ordered pair of the two target entities' type tags (e1 first)."""

    first: str
    second: str

    def __str__(self) -> str:
        return f"{self.first}-{self.second}"


@dataclass(frozen=True)
class ParsedInstance:
    """An instance bound to its external parse and (optional) NER tags."""

    instance: Instance
    parse: DependencyParse | None
    ner: tuple[str | None, ...] | None
    parse_failed: bool

    @property
    def id(self) -> str:
        return self.instance.id


class RecordError(NamedTuple):
    """One malformed record: its position in the file plus the reason."""

    index: int
    message: str


@dataclass
class LoadReport:
    """Result of loading one instance file: parsed records plus an error log."""

    instances: list[Instance]
    errors: list[RecordError]

    def __iter__(self):
        return iter(self.instances)

    def __len__(self) -> int:
        return len(self.instances)


def _validate_record(raw: Mapping, split: str, seen_ids: set[str]) -> Instance:
    for name in _REQUIRED_FIELDS:
        if name not in raw:
            raise ValueError(f"missing required field {name!r}")
    ident = raw["id"]
    if not isinstance(ident, str) or not ident:
        raise ValueError("id must be a non-empty string")
    if ident in seen_ids:
        raise ValueError(f"duplicate id {ident!r}")
    tokens = raw["tokens"]
    if not isinstance(tokens, list) or not tokens or not all(isinstance(t, str) for t in tokens):
        raise ValueError("tokens must be a non-empty list of strings")
    spans = []
    for prefix in ("e1", "e2"):
        start, end = raw[f"{prefix}_start"], raw[f"{prefix}_end"]
        if not isinstance(start, int) or not isinstance(end, int):
            raise ValueError(f"{prefix} span bounds must be integers")
        if not (0 <= start < end <= len(tokens)):
            raise ValueError(f"{prefix} span [{start}, {end}) out of range or empty")
        spans.append((start, end))
    (s1, e1), (s2, e2) = spans
    if s1 < e2 and s2 < e1:
        raise ValueError("entity spans overlap")
    for name in ("e1_type", "e2_type", "relation"):
        if not isinstance(raw[name], str) or not raw[name]:
            raise ValueError(f"{name} must be a non-empty string")
    return Instance(
        id=ident,
        tokens=tuple(tokens),
        e1_span=spans[0],
        e2_span=spans[1],
        e1_type=raw["e1_type"],
        e2_type=raw["e2_type"],
        gold_label=raw["relation"],
        split=split,
    )


def load_dataset(path: str | Path, split: str) -> LoadReport:
    """Load one instance file.

    Malformed records are collected into the report's error list (with their
    record index) rather than dropped silently; an unreadable file raises
    :class:`CorpusError`.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read instance file {path}: {exc}") from exc

    instances: list[Instance] = []
    errors: list[RecordError] = []
    seen: set[str] = set()
    for index, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            if not isinstance(raw, dict):
                raise ValueError("record is not a JSON object")
            instance = _validate_record(raw, split, seen)
        except ValueError as exc:
            errors.append(RecordError(index, str(exc)))
            continue
        seen.add(instance.id)
        instances.append(instance)
    return LoadReport(instances, errors)


def read_conllu(path: str | Path) -> dict[str, DependencyParse]:
    """Read a CoNLL-U sidecar keyed by its ``# sent_id`` comments.

    Multiword-token ranges (``1-2``) and empty nodes (``1.1``) are skipped;
    HEAD 0 becomes :data:`ROOT_HEAD`, other heads convert to 0-based indices.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read parse sidecar {path}: {exc}") from exc

    parses: dict[str, DependencyParse] = {}
    sent_id: str | None = None
    heads: list[int] = []
    labels: list[str] = []

    def flush() -> None:
        nonlocal sent_id, heads, labels
        if heads:
            if sent_id is None:
                raise CorpusError(f"{path}: sentence without a sent_id comment")
            if sent_id in parses:
                raise CorpusError(f"{path}: duplicate sent_id {sent_id!r}")
            parses[sent_id] = DependencyParse(tuple(heads), tuple(labels))
        sent_id, heads, labels = None, [], []

    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("sent_id"):
                _, _, value = body.partition("=")
                sent_id = value.strip()
            continue
        cols = line.split("\t")
        if len(cols) < 8:
            raise CorpusError(f"{path}:{lineno}: expected >=8 tab-separated columns")
        if "-" in cols[0] or "." in cols[0]:
            continue
        try:
            head = int(cols[6])
        except ValueError as exc:
            raise CorpusError(f"{path}:{lineno}: non-integer HEAD {cols[6]!r}") from exc
        heads.append(ROOT_HEAD if head == 0 else head - 1)
        labels.append(cols[7])
    flush()
    return parses


def read_ner_sidecar(path: str | Path) -> dict[str, tuple[str | None, ...]]:
    """Read the NER sidecar: one ``{"id", "tags"}`` record per line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read NER sidecar {path}: {exc}") from exc
    annotations: dict[str, tuple[str | None, ...]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            ident, tags = raw["id"], raw["tags"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CorpusError(f"{path}:{lineno}: malformed NER record ({exc})") from exc
        if not isinstance(tags, list) or not all(t is None or isinstance(t, str) for t in tags):
            raise CorpusError(f"{path}:{lineno}: tags must be a list of strings or nulls")
        annotations[ident] = tuple(tags)
    return annotations


def attach_parse(
    instance: Instance,
    parse: DependencyParse,
    ner: Sequence[str | None] | None = None,
) -> ParsedInstance:
    """Bind external parser/NER output to an instance.

    A token-count mismatch raises (it signals tokenization drift between the
    corpus and the parser); a structurally broken tree is tolerated and only
    flags the result ``parse_failed`` so the instance stays usable on the
    sentence-fallback path.
    """
    if parse.token_count != len(instance.tokens):
        raise TokenCountMismatch(
            f"instance {instance.id}: parse has {parse.token_count} tokens, "
            f"corpus has {len(instance.tokens)}"
        )
    if ner is not None and len(ner) != len(instance.tokens):
        raise CorpusError(
            f"instance {instance.id}: NER annotation has {len(ner)} tags, "
            f"expected {len(instance.tokens)}"
        )
    return ParsedInstance(
        instance=instance,
        parse=parse,
        ner=None if ner is None else tuple(ner),
        parse_failed=not parse.is_tree(),
    )


def assemble(
    instances: Iterable[Instance],
    parses: Mapping[str, DependencyParse],
    ner: Mapping[str, tuple[str | None, ...]] | None = None,
) -> tuple[list[ParsedInstance], list[str]]:
    """Join instances with their sidecar parses and NER tags.

    Instances without a parse, or whose sidecar data does not line up with
    the corpus tokenization, are retained as ``parse_failed``; each such case
    is described in the returned issue list.
    """
    parsed: list[ParsedInstance] = []
    issues: list[str] = []
    for instance in instances:
        parse = parses.get(instance.id)
        tags = ner.get(instance.id) if ner else None
        if tags is not None and len(tags) != len(instance.tokens):
            issues.append(f"{instance.id}: NER length mismatch, tags dropped")
            tags = None
        if parse is None:
            issues.append(f"{instance.id}: no parse in sidecar")
            parsed.append(ParsedInstance(instance, None, tags, parse_failed=True))
            continue
        try:
            parsed.append(attach_parse(instance, parse, tags))
        except TokenCountMismatch as exc:
            issues.append(str(exc))
            parsed.append(ParsedInstance(instance, None, tags, parse_failed=True))
    return parsed, issues


def entity_pair_type(instance: Instance, unordered: bool = False) -> EntityPairType:
    """Ordered (e1_type, e2_type) tag pair; ``unordered`` sorts the two tags."""
    first, second = instance.e1_type, instance.e2_type
    if unordered and second < first:
        first, second = second, first
    return EntityPairType(first, second)


def entity_pair_inventory(
    instances: Iterable[Instance], unordered: bool = False
) -> tuple[EntityPairType, ...]:
    return tuple(sorted({entity_pair_type(i, unordered) for i in instances}))


def relation_labels(
    instances: Iterable[Instance], include_no_relation: bool = False
) -> tuple[str, ...]:
    labels = {i.gold_label for i in instances}
    if not include_no_relation:
        labels.discard(NO_RELATION)
    return tuple(sorted(labels))


def instance_to_record(instance: Instance) -> dict:
    """Inverse of loading: an instance as a canonical JSONL record."""
    return {
        "id": instance.id,
        "tokens": list(instance.tokens),
        "e1_start": instance.e1_span[0],
        "e1_end": instance.e1_span[1],
        "e1_type": instance.e1_type,
        "e2_start": instance.e2_span[0],
        "e2_end": instance.e2_span[1],
        "e2_type": instance.e2_type,
        "relation": instance.gold_label,
    }


# Mapping from the REFinD release fields to the canonical record format.
# The release names its token list "token" and otherwise matches the
# canonical field names; ids may arrive as integers.
_REFIND_TOKEN_KEYS = ("tokens", "token")


def refind_record_to_canonical(raw: Mapping) -> dict:
    """Convert one raw REFinD record into a canonical instance record."""
    tokens = None
    for key in _REFIND_TOKEN_KEYS:
        if key in raw:
            tokens = raw[key]
            break
    if tokens is None:
        raise ValueError("record has no token list under 'tokens' or 'token'")
    record = {"id": str(raw["id"]), "tokens": list(tokens)}
    for name in ("e1_start", "e1_end", "e1_type", "e2_start", "e2_end", "e2_type", "relation"):
        if name not in raw:
            raise ValueError(f"record missing field {name!r}")
        record[name] = raw[name]
    return record


def convert_refind_file(in_path: str | Path, out_path: str | Path) -> int:
    """Rewrite a raw REFinD JSON-lines file as canonical records; returns count."""
    in_path, out_path = Path(in_path), Path(out_path)
    count = 0
    with in_path.open(encoding="utf-8") as src, out_path.open("w", encoding="utf-8") as dst:
        for line in src:
            if not line.strip():
                continue
            record = refind_record_to_canonical(json.loads(line))
            dst.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return count
