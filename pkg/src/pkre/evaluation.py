"""Scoring and the three experiment families: fixed-K evaluation, K sweeps,
and pattern-budget curves.

Reports always carry both micro- and macro-F1; the headline metric is a
configuration choice (``mode``).  With ``include_no_relation=True`` the
no-relation class counts like any other, so micro-F1 equals accuracy; with
``False`` the micro scores ignore instances where both sides say no-relation
(only real-relation precision/recall count) and the macro average skips the
no-relation class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .classifier import KnnClassificationEngine, Prediction
from .corpus import NO_RELATION, ParsedInstance, entity_pair_type
from .index import build_store, bucket_name_for
from .patterns import PatternVariant

METRIC_MODES = ("micro", "macro")


def _harmonic_f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ClassMetrics:
    label: str
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int
    correct: int

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
            "predicted": self.predicted,
            "correct": self.correct,
        }


@dataclass(frozen=True)
class EvalReport:
    per_class: dict[str, ClassMetrics]
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    mode: str
    include_no_relation: bool
    instance_count: int
    fallback_rate: float | None
    confusion: dict[str, dict[str, int]]

    @property
    def headline(self) -> float:
        return self.micro_f1 if self.mode == "micro" else self.macro_f1

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "include_no_relation": self.include_no_relation,
            "headline_f1": self.headline,
            "micro": {
                "precision": self.micro_precision,
                "recall": self.micro_recall,
                "f1": self.micro_f1,
            },
            "macro": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
            },
            "accuracy": self.accuracy,
            "instance_count": self.instance_count,
            "fallback_rate": self.fallback_rate,
            "per_class": {label: m.to_dict() for label, m in sorted(self.per_class.items())},
            "confusion": {g: dict(sorted(p.items())) for g, p in sorted(self.confusion.items())},
        }


def _gold_map(golds) -> dict[str, str]:
    if isinstance(golds, Mapping):
        return {str(k): str(v) for k, v in golds.items()}
    out: dict[str, str] = {}
    for item in golds:
        if isinstance(item, ParsedInstance):
            instance = item.instance
        else:
            instance = item
        if instance.gold_label is None:
            raise ValueError(f"instance {instance.id} has no gold label")
        out[instance.id] = instance.gold_label
    return out


def _pred_map(predictions) -> tuple[dict[str, str], float | None]:
    if isinstance(predictions, Mapping):
        return {str(k): str(v) for k, v in predictions.items()}, None
    labels: dict[str, str] = {}
    fallbacks = 0
    for p in predictions:
        if not isinstance(p, Prediction):
            raise TypeError(f"expected Prediction or a mapping, got {type(p).__name__}")
        labels[p.instance_id] = p.label
        fallbacks += int(p.used_fallback)
    rate = fallbacks / len(labels) if labels else 0.0
    return labels, rate


def f1_report(
    predictions,
    golds,
    mode: str = "micro",
    include_no_relation: bool = True,
) -> EvalReport:
    """Per-class and aggregate precision/recall/F1 for aligned predictions.

    ``predictions`` is a mapping id→label or a sequence of
    :class:`~pkre.classifier.Prediction`; ``golds`` is a mapping id→label or a
    sequence of (parsed) instances.
    """
    if mode not in METRIC_MODES:
        raise ValueError(f"mode must be one of {METRIC_MODES}, got {mode!r}")
    gold = _gold_map(golds)
    pred, fallback_rate = _pred_map(predictions)
    if set(gold) != set(pred):
        missing = sorted(set(gold) ^ set(pred))[:5]
        raise ValueError(
            f"prediction/gold id sets differ ({len(gold)} gold vs {len(pred)} "
            f"predicted); first differences: {missing}"
        )
    if not gold:
        raise ValueError("cannot score an empty instance set")

    n = len(gold)
    classes = sorted(set(gold.values()) | set(pred.values()))
    support = {c: 0 for c in classes}
    predicted = {c: 0 for c in classes}
    correct = {c: 0 for c in classes}
    confusion: dict[str, dict[str, int]] = {}
    for instance_id, gold_label in gold.items():
        pred_label = pred[instance_id]
        support[gold_label] += 1
        predicted[pred_label] += 1
        if gold_label == pred_label:
            correct[gold_label] += 1
        row = confusion.setdefault(gold_label, {})
        row[pred_label] = row.get(pred_label, 0) + 1

    per_class: dict[str, ClassMetrics] = {}
    for c in classes:
        p = correct[c] / predicted[c] if predicted[c] else 0.0
        r = correct[c] / support[c] if support[c] else 0.0
        per_class[c] = ClassMetrics(
            label=c,
            precision=p,
            recall=r,
            f1=_harmonic_f1(p, r),
            support=support[c],
            predicted=predicted[c],
            correct=correct[c],
        )

    accuracy = sum(correct.values()) / n
    if include_no_relation:
        micro_p = micro_r = micro_f = accuracy
    else:
        guessed = sum(v for c, v in predicted.items() if c != NO_RELATION)
        gold_pos = sum(v for c, v in support.items() if c != NO_RELATION)
        hits = sum(v for c, v in correct.items() if c != NO_RELATION)
        micro_p = hits / guessed if guessed else 1.0
        micro_r = hits / gold_pos if gold_pos else 0.0
        micro_f = _harmonic_f1(micro_p, micro_r)

    macro_classes = [c for c in classes if include_no_relation or c != NO_RELATION]
    if macro_classes:
        macro_p = float(np.mean([per_class[c].precision for c in macro_classes]))
        macro_r = float(np.mean([per_class[c].recall for c in macro_classes]))
        macro_f = float(np.mean([per_class[c].f1 for c in macro_classes]))
    else:
        macro_p = macro_r = macro_f = 0.0

    return EvalReport(
        per_class=per_class,
        micro_precision=micro_p,
        micro_recall=micro_r,
        micro_f1=micro_f,
        macro_precision=macro_p,
        macro_recall=macro_r,
        macro_f1=macro_f,
        accuracy=accuracy,
        mode=mode,
        include_no_relation=include_no_relation,
        instance_count=n,
        fallback_rate=fallback_rate,
        confusion=confusion,
    )


def format_report(report: EvalReport) -> str:
    """Human-readable per-class table with the aggregate footer."""
    width = max([len("class")] + [len(c) for c in report.per_class])
    lines = [
        f"{'class'.ljust(width)}  {'prec':>7}  {'rec':>7}  {'f1':>7}  {'support':>7}",
    ]
    for label in sorted(report.per_class):
        m = report.per_class[label]
        lines.append(
            f"{label.ljust(width)}  {m.precision:7.4f}  {m.recall:7.4f}  "
            f"{m.f1:7.4f}  {m.support:7d}"
        )
    lines.append("")
    lines.append(
        f"micro  P {report.micro_precision:.4f}  R {report.micro_recall:.4f}  "
        f"F1 {report.micro_f1:.4f}"
    )
    lines.append(
        f"macro  P {report.macro_precision:.4f}  R {report.macro_recall:.4f}  "
        f"F1 {report.macro_f1:.4f}"
    )
    lines.append(f"accuracy {report.accuracy:.4f}  instances {report.instance_count}")
    if report.fallback_rate is not None:
        lines.append(f"fallback rate {report.fallback_rate:.4f}")
    lines.append(
        f"headline ({report.mode}, no_relation "
        f"{'included' if report.include_no_relation else 'excluded'}): "
        f"{report.headline:.4f}"
    )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SweepPoint:
    k: int
    f1: float
    micro_f1: float
    macro_f1: float
    accuracy: float

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "f1": self.f1,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
        }


@dataclass(frozen=True)
class SweepResult:
    variant: str
    points: tuple[SweepPoint, ...]
    best_k: int
    mode: str
    include_no_relation: bool
    selection_split: str

    @property
    def best_f1(self) -> float:
        return max(p.f1 for p in self.points)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "mode": self.mode,
            "include_no_relation": self.include_no_relation,
            "selection_split": self.selection_split,
            "best_k": self.best_k,
            "best_f1": self.best_f1,
            "points": [p.to_dict() for p in self.points],
        }


def sweep_k(
    engine: KnnClassificationEngine,
    instances: Sequence[ParsedInstance],
    ks: Iterable[int] = range(1, 21),
    mode: str = "micro",
    include_no_relation: bool = True,
    selection_split: str = "dev",
) -> SweepResult:
    """F1 at each K, computing neighbours once at the largest K and rescoring
    prefixes; ``best_k`` is the argmax (smallest K on ties)."""
    ks = sorted({int(k) for k in ks})
    if not ks or ks[0] < 1:
        raise ValueError("K values must be positive integers")
    golds = _gold_map(instances)
    cap = ks[-1]
    cached = [engine.collect_neighbors(pi, cap=cap) for pi in instances]
    points = []
    for k in ks:
        preds = [
            engine.decide(pi.id, variant, used_fallback, lists, k)
            for pi, (variant, used_fallback, lists) in zip(instances, cached)
        ]
        report = f1_report(preds, golds, mode, include_no_relation)
        points.append(
            SweepPoint(
                k=k,
                f1=report.headline,
                micro_f1=report.micro_f1,
                macro_f1=report.macro_f1,
                accuracy=report.accuracy,
            )
        )
    best = max(points, key=lambda p: (p.f1, -p.k))
    return SweepResult(
        variant=engine.variant.value,
        points=tuple(points),
        best_k=best.k,
        mode=mode,
        include_no_relation=include_no_relation,
        selection_split=selection_split,
    )


def split_fraction(
    instances: Sequence[ParsedInstance], fraction: float, seed: int
) -> tuple[list[ParsedInstance], list[ParsedInstance]]:
    """Hold out a random ``fraction`` of instances (at least one); returns
    (held_out, rest), both preserving input order."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    if not instances:
        return [], []
    count = max(1, round(fraction * len(instances)))
    order = np.random.default_rng(seed).permutation(len(instances))
    chosen = {int(i) for i in order[:count]}
    held = [pi for position, pi in enumerate(instances) if position in chosen]
    rest = [pi for position, pi in enumerate(instances) if position not in chosen]
    return held, rest


def _route_name(pi: ParsedInstance, unordered: bool) -> str:
    return bucket_name_for(
        pi.instance.gold_label, entity_pair_type(pi.instance, unordered)
    )


def random_pattern_subset(
    instances: Sequence[ParsedInstance],
    n: int,
    seed: int,
    unordered: bool = False,
) -> list[ParsedInstance]:
    """At most ``n`` instances per class bucket, sampled uniformly without
    replacement; deterministic for a given seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    groups: dict[str, list[ParsedInstance]] = {}
    for pi in instances:
        groups.setdefault(_route_name(pi, unordered), []).append(pi)
    rng = np.random.default_rng(seed)
    keep: set[str] = set()
    for name in sorted(groups):
        members = sorted(groups[name], key=lambda pi: pi.id)
        if len(members) <= n:
            keep.update(pi.id for pi in members)
        else:
            for i in rng.choice(len(members), size=n, replace=False):
                keep.add(members[int(i)].id)
    return [pi for pi in instances if pi.id in keep]


def most_frequent_patterns(
    train: Sequence[ParsedInstance],
    dev: Sequence[ParsedInstance],
    engine: KnnClassificationEngine,
    n: int,
    k_count: int | None = None,
) -> list[ParsedInstance]:
    """Training instances whose patterns show up most often as winning top-K
    evidence when the dev split is classified correctly.

    Counts are kept per class bucket; ties break by the highest similarity the
    pattern ever scored, then by ascending id.  Dev instances the full store
    gets wrong contribute nothing, so the selection can be empty.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    k = engine.k if k_count is None else k_count
    counts: dict[str, dict[str, list]] = {}
    for pi in dev:
        if pi.instance.gold_label is None:
            raise ValueError(f"dev instance {pi.id} has no gold label")
        prediction = engine.classify(pi, k=k)
        if prediction.label != pi.instance.gold_label or prediction.winning is None:
            continue
        bucket = counts.setdefault(prediction.winning.bucket_name, {})
        for sim, train_id in prediction.winning.neighbors:
            entry = bucket.setdefault(train_id, [0, float("-inf")])
            entry[0] += 1
            entry[1] = max(entry[1], sim)
    keep: set[str] = set()
    for name in sorted(counts):
        ranked = sorted(
            counts[name].items(), key=lambda kv: (-kv[1][0], -kv[1][1], kv[0])
        )
        keep.update(train_id for train_id, _ in ranked[:n])
    return [pi for pi in train if pi.id in keep]


@dataclass(frozen=True)
class BudgetPoint:
    n: int
    f1: float
    micro_f1: float
    macro_f1: float
    accuracy: float
    selected: int

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "f1": self.f1,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "selected": self.selected,
        }


@dataclass(frozen=True)
class BudgetResult:
    selection_mode: str
    points: tuple[BudgetPoint, ...]
    k: int
    seed: int | None
    variant: str
    mode: str
    include_no_relation: bool

    def to_dict(self) -> dict:
        return {
            "selection_mode": self.selection_mode,
            "k": self.k,
            "seed": self.seed,
            "variant": self.variant,
            "mode": self.mode,
            "include_no_relation": self.include_no_relation,
            "points": [p.to_dict() for p in self.points],
        }


BUDGET_MODES = ("random", "most_frequent")


def run_budget(
    train: Sequence[ParsedInstance],
    dev: Sequence[ParsedInstance],
    provider,
    variant: PatternVariant,
    selection_mode: str,
    n_values: Sequence[int],
    k: int,
    seed: int = 2024,
    unordered_pairs: bool = False,
    substitute_targets_in_plain: bool = True,
    mode: str = "micro",
    include_no_relation: bool = True,
) -> BudgetResult:
    """Evaluate dev F1 with indices rebuilt from shrinking training budgets.

    For each N a per-class subset of the training instances is chosen (random
    draw, or the most-frequent-evidence ranking computed against indices over
    the full training set), fresh indices are built from that subset only, and
    the dev split is scored at the given K.
    """
    if selection_mode not in BUDGET_MODES:
        raise ValueError(f"selection_mode must be one of {BUDGET_MODES}")
    values = sorted({int(v) for v in n_values})
    if not values or values[0] < 1:
        raise ValueError("N values must be distinct positive integers")
    golds = _gold_map(dev)

    full_engine = None
    if selection_mode == "most_frequent":
        full_store = build_store(
            train,
            [variant],
            provider,
            source_splits=["train"],
            unordered_pairs=unordered_pairs,
            substitute_targets_in_plain=substitute_targets_in_plain,
        )
        full_engine = KnnClassificationEngine(
            full_store, provider, variant=variant, k=k
        )

    points = []
    for n in values:
        if selection_mode == "random":
            subset = random_pattern_subset(train, n, seed, unordered_pairs)
        else:
            subset = most_frequent_patterns(train, dev, full_engine, n, k_count=k)
        if subset:
            store = build_store(
                subset,
                [variant],
                provider,
                source_splits=["train"],
                unordered_pairs=unordered_pairs,
                substitute_targets_in_plain=substitute_targets_in_plain,
            )
            engine = KnnClassificationEngine(store, provider, variant=variant, k=k)
            preds = engine.classify_batch(dev)
            report = f1_report(preds, golds, mode, include_no_relation)
            point = BudgetPoint(
                n=n,
                f1=report.headline,
                micro_f1=report.micro_f1,
                macro_f1=report.macro_f1,
                accuracy=report.accuracy,
                selected=len(subset),
            )
        else:
            point = BudgetPoint(
                n=n, f1=0.0, micro_f1=0.0, macro_f1=0.0, accuracy=0.0, selected=0
            )
        points.append(point)
    return BudgetResult(
        selection_mode=selection_mode,
        points=tuple(points),
        k=k,
        seed=seed if selection_mode == "random" else None,
        variant=variant.value,
        mode=mode,
        include_no_relation=include_no_relation,
    )


def write_series(
    path: str | Path,
    header: Sequence[str],
    rows: Iterable[Sequence],
    config: Mapping | None = None,
) -> None:
    """Tab-separated series for external plotting, with a config echo line."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        if config is not None:
            handle.write("# config " + json.dumps(config, sort_keys=True) + "\n")
        handle.write("\t".join(header) + "\n")
        for row in rows:
            handle.write("\t".join(str(value) for value in row) + "\n")
