"""Run configuration: one YAML file drives every command.

Schema (all keys optional unless noted; relative paths resolve against the
config file's directory):

    data:                       # per-split input files
      train:
        instances: train.jsonl  # required within a split block
        parses: train.conllu    # optional dependency sidecar
        ner: train_ner.json     # optional NER sidecar
      dev: {...}
      public_test: {...}
    embedding:                  # see ProviderConfig: backend file|http|hash,
      backend: hash             # dimension, endpoint, path, cache_path, ...
      dimension: 64
    variant: sdp_dep_ner        # pattern flavour indexed/queried
    k: 14                       # averaging depth, 1..100
    metric:
      mode: micro               # headline metric: micro | macro
      include_no_relation: true
    include_public_test: false  # also index the public_test split
    unordered_pairs: false
    substitute_targets_in_plain: true
    seed: 2024
    threads: 1                  # null -> all cores
    paths:
      index: runs/index.pkre
      reports: runs/
    sweep:
      k_min: 1
      k_max: 20
      split: dev                # dev | train10 (10% train holdout)
    budget:
      mode: most_frequent       # random | most_frequent
      n_values: [25, 50, 75, 100]
      k: 4
    service:
      host: 127.0.0.1
      port: 8234
      pool_split: dev
      snapshot: runs/annotations.json
      ui_dir: null              # static UI bundle directory
      k: 5
      extra_labels: []
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from .corpus import (
    CorpusError,
    LoadReport,
    ParsedInstance,
    assemble,
    load_dataset,
    read_conllu,
    read_ner_sidecar,
)
from .embeddings import ProviderConfig
from .evaluation import BUDGET_MODES, METRIC_MODES
from .patterns import PatternVariant

K_RANGE = (1, 100)


class ConfigError(Exception):
    """Bad value, unknown key, or missing input path in the run config."""


def _require_keys(raw: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(unknown)}")


def _as_path(value, base: Path) -> Path:
    path = Path(str(value))
    return path if path.is_absolute() else base / path


@dataclass
class SplitPaths:
    instances: Path
    parses: Path | None = None
    ner: Path | None = None

    def to_dict(self) -> dict:
        return {
            "instances": str(self.instances),
            "parses": str(self.parses) if self.parses else None,
            "ner": str(self.ner) if self.ner else None,
        }


@dataclass
class SweepConfig:
    k_min: int = 1
    k_max: int = 20
    split: str = "dev"

    def to_dict(self) -> dict:
        return {"k_min": self.k_min, "k_max": self.k_max, "split": self.split}


@dataclass
class BudgetConfig:
    mode: str = "most_frequent"
    n_values: tuple[int, ...] = (25, 50, 75, 100)
    k: int = 4
    split: str = "dev"

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_values": list(self.n_values),
            "k": self.k,
            "split": self.split,
        }


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8234
    pool_split: str = "dev"
    snapshot: Path | None = None
    ui_dir: Path | None = None
    k: int = 5
    extra_labels: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "host": self.host,
            "port": self.port,
            "pool_split": self.pool_split,
            "snapshot": str(self.snapshot) if self.snapshot else None,
            "ui_dir": str(self.ui_dir) if self.ui_dir else None,
            "k": self.k,
            "extra_labels": list(self.extra_labels),
        }


@dataclass
class RunConfig:
    data: dict[str, SplitPaths] = field(default_factory=dict)
    embedding: ProviderConfig = field(default_factory=ProviderConfig)
    variant: str = "sdp_dep_ner"
    k: int = 14
    metric_mode: str = "micro"
    include_no_relation: bool = True
    include_public_test: bool = False
    unordered_pairs: bool = False
    substitute_targets_in_plain: bool = True
    seed: int = 2024
    threads: int | None = 1
    index_path: Path = Path("runs/index.pkre")
    reports_dir: Path = Path("runs")
    sweep: SweepConfig = field(default_factory=SweepConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)

    # -- construction --------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: Mapping, base: Path = Path(".")) -> "RunConfig":
        _require_keys(
            raw,
            {
                "data",
                "embedding",
                "variant",
                "k",
                "metric",
                "include_public_test",
                "unordered_pairs",
                "substitute_targets_in_plain",
                "seed",
                "threads",
                "paths",
                "sweep",
                "budget",
                "service",
            },
            "config",
        )
        cfg = cls()

        for split, block in (raw.get("data") or {}).items():
            if not isinstance(block, Mapping) or "instances" not in block:
                raise ConfigError(f"data.{split} must be a mapping with an 'instances' path")
            _require_keys(block, {"instances", "parses", "ner"}, f"data.{split}")
            cfg.data[str(split)] = SplitPaths(
                instances=_as_path(block["instances"], base),
                parses=_as_path(block["parses"], base) if block.get("parses") else None,
                ner=_as_path(block["ner"], base) if block.get("ner") else None,
            )

        embedding = dict(raw.get("embedding") or {})
        if "path" in embedding and embedding["path"]:
            embedding["path"] = str(_as_path(embedding["path"], base))
        if "cache_path" in embedding and embedding["cache_path"]:
            embedding["cache_path"] = str(_as_path(embedding["cache_path"], base))
        try:
            cfg.embedding = ProviderConfig.from_dict(embedding)
        except ValueError as exc:
            raise ConfigError(f"embedding: {exc}") from exc

        cfg.variant = str(raw.get("variant", cfg.variant))
        cfg.k = raw.get("k", cfg.k)

        metric = raw.get("metric") or {}
        _require_keys(metric, {"mode", "include_no_relation"}, "metric")
        cfg.metric_mode = str(metric.get("mode", cfg.metric_mode))
        cfg.include_no_relation = bool(
            metric.get("include_no_relation", cfg.include_no_relation)
        )

        cfg.include_public_test = bool(raw.get("include_public_test", False))
        cfg.unordered_pairs = bool(raw.get("unordered_pairs", False))
        cfg.substitute_targets_in_plain = bool(
            raw.get("substitute_targets_in_plain", True)
        )
        cfg.seed = int(raw.get("seed", cfg.seed))
        threads = raw.get("threads", cfg.threads)
        cfg.threads = None if threads is None else int(threads)

        paths = raw.get("paths") or {}
        _require_keys(paths, {"index", "reports"}, "paths")
        cfg.index_path = _as_path(paths.get("index", cfg.index_path), base)
        cfg.reports_dir = _as_path(paths.get("reports", cfg.reports_dir), base)

        sweep = raw.get("sweep") or {}
        _require_keys(sweep, {"k_min", "k_max", "split"}, "sweep")
        cfg.sweep = SweepConfig(
            k_min=int(sweep.get("k_min", 1)),
            k_max=int(sweep.get("k_max", 20)),
            split=str(sweep.get("split", "dev")),
        )

        budget = raw.get("budget") or {}
        _require_keys(budget, {"mode", "n_values", "k", "split"}, "budget")
        cfg.budget = BudgetConfig(
            mode=str(budget.get("mode", "most_frequent")),
            n_values=tuple(int(v) for v in budget.get("n_values", (25, 50, 75, 100))),
            k=int(budget.get("k", 4)),
            split=str(budget.get("split", "dev")),
        )

        service = raw.get("service") or {}
        _require_keys(
            service,
            {"host", "port", "pool_split", "snapshot", "ui_dir", "k", "extra_labels"},
            "service",
        )
        cfg.service = ServiceConfig(
            host=str(service.get("host", "127.0.0.1")),
            port=int(service.get("port", 8234)),
            pool_split=str(service.get("pool_split", "dev")),
            snapshot=_as_path(service["snapshot"], base) if service.get("snapshot") else None,
            ui_dir=_as_path(service["ui_dir"], base) if service.get("ui_dir") else None,
            k=int(service.get("k", 5)),
            extra_labels=tuple(str(v) for v in service.get("extra_labels", ())),
        )

        cfg.validate()
        return cfg

    @classmethod
    def load(
        cls, path: str | Path, overrides: Mapping[str, object] | None = None
    ) -> "RunConfig":
        """Parse a YAML config; ``overrides`` maps dotted keys (``"k"``,
        ``"embedding.backend"``) onto replacement values."""
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(raw, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = _deep_copy(raw)
        for dotted, value in (overrides or {}).items():
            _set_dotted(raw, dotted, value)
        return cls.from_dict(raw, base=path.parent.resolve())

    def validate(self) -> None:
        try:
            PatternVariant.from_name(self.variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.variant == PatternVariant.SENTENCE_FALLBACK.value:
            raise ConfigError("variant must be a path flavour; the sentence family is the fallback")
        lo, hi = K_RANGE
        if not isinstance(self.k, int) or isinstance(self.k, bool) or not lo <= self.k <= hi:
            raise ConfigError(f"k must be an integer in [{lo}, {hi}], got {self.k!r}")
        if self.metric_mode not in METRIC_MODES:
            raise ConfigError(f"metric.mode must be one of {METRIC_MODES}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1 (or null for all cores)")
        if not 1 <= self.sweep.k_min <= self.sweep.k_max <= hi:
            raise ConfigError(f"sweep range must satisfy 1 <= k_min <= k_max <= {hi}")
        if self.budget.mode not in BUDGET_MODES:
            raise ConfigError(f"budget.mode must be one of {BUDGET_MODES}")
        if len(set(self.budget.n_values)) != len(self.budget.n_values) or any(
            n < 1 for n in self.budget.n_values
        ):
            raise ConfigError("budget.n_values must be distinct positive integers")
        if not lo <= self.budget.k <= hi:
            raise ConfigError(f"budget.k must be in [{lo}, {hi}]")

    # -- use ------------------------------------------------------------------

    @property
    def thread_count(self) -> int:
        return self.threads if self.threads is not None else (os.cpu_count() or 1)

    def split_paths(self, split: str) -> SplitPaths:
        if split not in self.data:
            raise ConfigError(
                f"split {split!r} is not configured (have: {sorted(self.data) or 'none'})"
            )
        return self.data[split]

    def ensure_split_paths(self, split: str) -> SplitPaths:
        paths = self.split_paths(split)
        for name, value in (
            ("instances", paths.instances),
            ("parses", paths.parses),
            ("ner", paths.ner),
        ):
            if value is not None and not Path(value).is_file():
                raise ConfigError(f"data.{split}.{name}: file not found: {value}")
        return paths

    def to_dict(self) -> dict:
        return {
            "data": {split: paths.to_dict() for split, paths in sorted(self.data.items())},
            "embedding": self.embedding.to_dict(),
            "variant": self.variant,
            "k": self.k,
            "metric": {
                "mode": self.metric_mode,
                "include_no_relation": self.include_no_relation,
            },
            "include_public_test": self.include_public_test,
            "unordered_pairs": self.unordered_pairs,
            "substitute_targets_in_plain": self.substitute_targets_in_plain,
            "seed": self.seed,
            "threads": self.threads,
            "paths": {"index": str(self.index_path), "reports": str(self.reports_dir)},
            "sweep": self.sweep.to_dict(),
            "budget": self.budget.to_dict(),
            "service": self.service.to_dict(),
        }


def _deep_copy(raw: Mapping) -> dict:
    out: dict = {}
    for key, value in raw.items():
        out[str(key)] = _deep_copy(value) if isinstance(value, Mapping) else value
    return out


def _set_dotted(raw: dict, dotted: str, value) -> None:
    parts = [p for p in str(dotted).split(".") if p]
    if not parts:
        raise ConfigError(f"empty override key {dotted!r}")
    node = raw
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = value


@dataclass
class SplitLoad:
    """A split's instances with everything that went wrong loading them."""

    instances: list[ParsedInstance]
    report: LoadReport
    issues: list[str]


def load_split(config: RunConfig, split: str, strict: bool = True) -> SplitLoad:
    """Read one split's instance file plus optional parse/NER sidecars.

    With ``strict`` (the default) malformed instance records abort the load;
    otherwise they are carried in the report for display.
    """
    paths = config.ensure_split_paths(split)
    report = load_dataset(paths.instances, split)
    if strict and report.errors:
        first = report.errors[0]
        raise CorpusError(
            f"{paths.instances}: {len(report.errors)} malformed record(s); "
            f"first at record {first.index}: {first.message}"
        )
    parses = read_conllu(paths.parses) if paths.parses else {}
    ner = read_ner_sidecar(paths.ner) if paths.ner else None
    instances, issues = assemble(report.instances, parses, ner)
    return SplitLoad(instances=instances, report=report, issues=issues)
