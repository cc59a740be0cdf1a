"""Command-line front end: one binary, one YAML config, eight subcommands.

    pkre ingest-check -c run.yaml          # validate corpus + sidecars
    pkre build -c run.yaml                 # build + persist class indices
    pkre classify -c run.yaml --split dev  # dump predictions JSONL
    pkre eval -c run.yaml --split dev      # score a split, write reports
    pkre sweep -c run.yaml                 # F1 across a K range
    pkre budget -c run.yaml                # pattern-budget curves
    pkre select-patterns -c run.yaml -n 50 # emit a per-class pattern subset
    pkre serve -c run.yaml                 # annotation service + UI

Every command resolves the config file first (``--set key=value`` overrides
any field, dotted paths allowed) and echoes the resolved config into each
artifact it writes.  Exit codes: 0 success, 1 input error, 2 embedding/service
backend error, 3 internal invariant violation.
"""

from __future__ import annotations

import json
import signal
import sys
import traceback
from pathlib import Path

import click
import yaml

from .classifier import KnnClassificationEngine, read_predictions, write_predictions
from .config import ConfigError, RunConfig, load_split
from .corpus import (
    CorpusError,
    entity_pair_inventory,
    instance_to_record,
    relation_labels,
)
from .embeddings import EmbeddingError, EmbeddingProvider
from .evaluation import (
    f1_report,
    format_report,
    most_frequent_patterns,
    random_pattern_subset,
    run_budget,
    split_fraction,
    sweep_k,
    write_series,
)
from .index import IndexFormatError, build_store, load_store, persist_store
from .patterns import PatternVariant
from .service import AnnotationState, SnapshotError, create_app, restore_state

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_BACKEND = 2
EXIT_INTERNAL = 3


class BackendError(RuntimeError):
    """External dependency (embedding service, HTTP port) failed."""


class InvariantViolation(RuntimeError):
    """An internal consistency check failed; indicates a bug, not bad input."""


def _parse_overrides(set_items, **extras) -> dict:
    overrides: dict = {}
    for item in set_items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise click.UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = yaml.safe_load(value)
    for dotted, value in extras.items():
        if value is not None:
            overrides[dotted] = value
    return overrides


def _config_options(fn):
    fn = click.option(
        "--set",
        "set_items",
        multiple=True,
        metavar="KEY=VALUE",
        help="Override any config field (dotted path, YAML-parsed value).",
    )(fn)
    fn = click.option(
        "-c",
        "--config",
        "config_path",
        required=True,
        type=click.Path(dir_okay=False),
        help="Run configuration YAML.",
    )(fn)
    return fn


def _load_index(cfg: RunConfig):
    if not cfg.index_path.is_file():
        raise ConfigError(
            f"index file not found: {cfg.index_path} (run 'pkre build' first)"
        )
    store = load_store(cfg.index_path)
    if store.dimension != cfg.embedding.dimension:
        raise ConfigError(
            f"index dimension {store.dimension} does not match configured "
            f"embedding dimension {cfg.embedding.dimension}"
        )
    return store


def _engine(cfg: RunConfig, store, provider, k: int | None = None) -> KnnClassificationEngine:
    return KnnClassificationEngine(
        store,
        provider,
        variant=PatternVariant.from_name(cfg.variant),
        k=cfg.k if k is None else k,
    )


def _reports_dir(cfg: RunConfig) -> Path:
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    return cfg.reports_dir


@click.group()
def cli() -> None:
    """Relation classification by nearest-neighbour search over dependency-path
    patterns: build class indices, classify, evaluate, and annotate."""


# --------------------------------------------------------------------------


@cli.command("ingest-check")
@_config_options
@click.option("--strict", is_flag=True, help="Fail on any malformed instance record.")
def cmd_ingest_check(config_path, set_items, strict):
    """Validate the configured instance files and sidecars; report coverage."""
    cfg = RunConfig.load(config_path, _parse_overrides(set_items))
    if not cfg.data:
        raise ConfigError("no data splits configured")
    summary: dict[str, dict] = {}
    for split in cfg.data:
        load = load_split(cfg, split, strict=False)
        parse_failures = sum(pi.parse_failed for pi in load.instances)
        ner_covered = sum(pi.ner is not None for pi in load.instances)
        info = {
            "instances": len(load.instances),
            "record_errors": [
                {"record": e.index, "message": e.message} for e in load.report.errors[:20]
            ],
            "record_error_count": len(load.report.errors),
            "parse_failures": parse_failures,
            "parse_failure_fraction": (
                parse_failures / len(load.instances) if load.instances else 0.0
            ),
            "ner_covered": ner_covered,
            "issues": load.issues[:20],
            "issue_count": len(load.issues),
            "labels": list(relation_labels((pi.instance for pi in load.instances), True)),
            "entity_pairs": [
                str(p)
                for p in entity_pair_inventory(
                    (pi.instance for pi in load.instances), cfg.unordered_pairs
                )
            ],
        }
        summary[split] = info
        click.echo(
            f"{split}: {info['instances']} instances, "
            f"{info['record_error_count']} bad record(s), "
            f"parse failures {parse_failures} "
            f"({info['parse_failure_fraction']:.2%}), "
            f"{len(info['labels'])} label(s), {len(info['entity_pairs'])} pair type(s)"
        )
        for err in info["record_errors"][:5]:
            click.echo(f"  record {err['record']}: {err['message']}")
    out = _reports_dir(cfg) / "ingest_check.json"
    out.write_text(
        json.dumps({"config": cfg.to_dict(), "splits": summary}, indent=2, sort_keys=True)
        + "\n"
    )
    click.echo(f"wrote {out}")
    if strict and any(info["record_error_count"] for info in summary.values()):
        raise CorpusError("malformed records found (see report)")


@cli.command("build")
@_config_options
@click.option("--variant", "variant_opt", default=None, help="Pattern variant override.")
@click.option(
    "--train-only/--with-public-test",
    "train_only",
    default=None,
    help="Override the include_public_test config flag.",
)
def cmd_build(config_path, set_items, variant_opt, train_only):
    """Build the class-partitioned indices and persist them with a manifest."""
    extras = {"variant": variant_opt}
    if train_only is not None:
        extras["include_public_test"] = not train_only
    cfg = RunConfig.load(config_path, _parse_overrides(set_items, **extras))
    splits = ["train"] + (["public_test"] if cfg.include_public_test else [])
    for split in splits:
        cfg.ensure_split_paths(split)
    instances = []
    for split in splits:
        load = load_split(cfg, split)
        instances.extend(load.instances)
        for issue in load.issues[:5]:
            click.echo(f"note: {issue}")
    provider = EmbeddingProvider(cfg.embedding)
    store = build_store(
        instances,
        [PatternVariant.from_name(cfg.variant)],
        provider,
        source_splits=splits,
        unordered_pairs=cfg.unordered_pairs,
        substitute_targets_in_plain=cfg.substitute_targets_in_plain,
        config_echo=cfg.to_dict(),
    )
    cfg.index_path.parent.mkdir(parents=True, exist_ok=True)
    persist_store(store, cfg.index_path)
    manifest = store.manifest
    out = _reports_dir(cfg) / "build_manifest.json"
    out.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    total_buckets = sum(len(v) for v in manifest.bucket_counts.values())
    click.echo(f"indexed {manifest.instance_count} instances from {'+'.join(splits)}")
    for family, counts in sorted(manifest.bucket_counts.items()):
        click.echo(
            f"  {family}: {len(counts)} indices, {sum(counts.values())} entries"
        )
    click.echo(
        f"  total {total_buckets} indices; parse failures "
        f"{manifest.parse_failure_count} ({manifest.parse_failure_fraction:.2%})"
    )
    click.echo(f"wrote {cfg.index_path} and {out}")


@cli.command("classify")
@_config_options
@click.option("--split", default="dev", show_default=True)
@click.option("--k", "k_opt", type=int, default=None, help="Averaging depth override.")
@click.option("--output", type=click.Path(dir_okay=False), default=None)
def cmd_classify(config_path, set_items, split, k_opt, output):
    """Classify one split and dump predictions (JSONL with a config header)."""
    cfg = RunConfig.load(config_path, _parse_overrides(set_items, k=k_opt))
    instances = load_split(cfg, split).instances
    store = _load_index(cfg)
    provider = EmbeddingProvider(cfg.embedding)
    engine = _engine(cfg, store, provider)
    predictions = engine.classify_batch(instances, threads=cfg.thread_count)
    out = Path(output) if output else _reports_dir(cfg) / f"predictions_{split}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(predictions, out, config=cfg.to_dict())
    fallback = sum(p.used_fallback for p in predictions)
    click.echo(
        f"classified {len(predictions)} instances "
        f"(fallback {fallback}, {fallback / len(predictions):.2%})"
        if predictions
        else "classified 0 instances"
    )
    click.echo(f"wrote {out}")


@cli.command("eval")
@_config_options
@click.option("--split", default="dev", show_default=True)
@click.option("--k", "k_opt", type=int, default=None)
@click.option(
    "--predictions",
    "predictions_path",
    type=click.Path(dir_okay=False, exists=True),
    default=None,
    help="Score an existing predictions file instead of classifying.",
)
def cmd_eval(config_path, set_items, split, k_opt, predictions_path):
    """Score a split: per-class table, micro/macro F1, confusion counts."""
    cfg = RunConfig.load(config_path, _parse_overrides(set_items, k=k_opt))
    instances = load_split(cfg, split).instances
    if predictions_path:
        _, predictions = read_predictions(predictions_path)
    else:
        store = _load_index(cfg)
        provider = EmbeddingProvider(cfg.embedding)
        engine = _engine(cfg, store, provider)
        predictions = engine.classify_batch(instances, threads=cfg.thread_count)
    report = f1_report(predictions, instances, cfg.metric_mode, cfg.include_no_relation)
    reports = _reports_dir(cfg)
    record = {
        "config": cfg.to_dict(),
        "split": split,
        "k": cfg.k,
        "variant": cfg.variant,
        "report": report.to_dict(),
    }
    json_out = reports / f"eval_{split}.json"
    json_out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    text_out = reports / f"eval_{split}.txt"
    text_out.write_text(
        "# config " + json.dumps(cfg.to_dict(), sort_keys=True) + "\n" + format_report(report)
    )
    click.echo(format_report(report), nl=False)
    click.echo(f"wrote {json_out} and {text_out}")


@cli.command("sweep")
@_config_options
@click.option("--split", default=None, help="dev | train | public_test | train10.")
def cmd_sweep(config_path, set_items, split):
    """Evaluate every K in the configured range, caching neighbours across K."""
    cfg = RunConfig.load(config_path, _parse_overrides(set_items))
    split = split or cfg.sweep.split
    provider = EmbeddingProvider(cfg.embedding)
    if split == "train10":
        # selection protocol: hold out 10% of train, index the rest
        train = load_split(cfg, "train").instances
        holdout, rest = split_fraction(train, 0.1, cfg.seed)
        build_instances = list(rest)
        sources = ["train@90"]
        if cfg.include_public_test:
            build_instances.extend(load_split(cfg, "public_test").instances)
            sources.append("public_test")
        store = build_store(
            build_instances,
            [PatternVariant.from_name(cfg.variant)],
            provider,
            source_splits=sources,
            unordered_pairs=cfg.unordered_pairs,
            substitute_targets_in_plain=cfg.substitute_targets_in_plain,
            config_echo=cfg.to_dict(),
        )
        instances = holdout
    else:
        store = _load_index(cfg)
        instances = load_split(cfg, split).instances
    engine = _engine(cfg, store, provider, k=cfg.sweep.k_max)
    result = sweep_k(
        engine,
        instances,
        range(cfg.sweep.k_min, cfg.sweep.k_max + 1),
        mode=cfg.metric_mode,
        include_no_relation=cfg.include_no_relation,
        selection_split=split,
    )
    reports = _reports_dir(cfg)
    json_out = reports / f"sweep_{cfg.variant}_{split}.json"
    json_out.write_text(
        json.dumps({"config": cfg.to_dict(), "result": result.to_dict()}, indent=2, sort_keys=True)
        + "\n"
    )
    tsv_out = reports / f"sweep_{cfg.variant}_{split}.tsv"
    write_series(
        tsv_out,
        ["k", "f1", "micro_f1", "macro_f1", "accuracy"],
        [(p.k, p.f1, p.micro_f1, p.macro_f1, p.accuracy) for p in result.points],
        config=cfg.to_dict(),
    )
    for point in result.points:
        marker = "  <- best" if point.k == result.best_k else ""
        click.echo(f"K={point.k:<3d} F1={point.f1:.4f}{marker}")
    click.echo(f"best K on {split}: {result.best_k} (F1 {result.best_f1:.4f})")
    click.echo(f"wrote {json_out} and {tsv_out}")


@cli.command("budget")
@_config_options
@click.option("--mode", "mode_opt", type=click.Choice(["random", "most_frequent"]), default=None)
def cmd_budget(config_path, set_items, mode_opt):
    """Dev F1 as the per-class training-pattern budget shrinks."""
    cfg = RunConfig.load(
        config_path, _parse_overrides(set_items, **{"budget.mode": mode_opt})
    )
    train = load_split(cfg, "train").instances
    dev = load_split(cfg, cfg.budget.split).instances
    provider = EmbeddingProvider(cfg.embedding)
    result = run_budget(
        train,
        dev,
        provider,
        PatternVariant.from_name(cfg.variant),
        cfg.budget.mode,
        cfg.budget.n_values,
        cfg.budget.k,
        seed=cfg.seed,
        unordered_pairs=cfg.unordered_pairs,
        substitute_targets_in_plain=cfg.substitute_targets_in_plain,
        mode=cfg.metric_mode,
        include_no_relation=cfg.include_no_relation,
    )
    reports = _reports_dir(cfg)
    json_out = reports / f"budget_{cfg.budget.mode}.json"
    json_out.write_text(
        json.dumps({"config": cfg.to_dict(), "result": result.to_dict()}, indent=2, sort_keys=True)
        + "\n"
    )
    tsv_out = reports / f"budget_{cfg.budget.mode}.tsv"
    write_series(
        tsv_out,
        ["n", "f1", "micro_f1", "macro_f1", "accuracy", "selected"],
        [
            (p.n, p.f1, p.micro_f1, p.macro_f1, p.accuracy, p.selected)
            for p in result.points
        ],
        config=cfg.to_dict(),
    )
    for point in result.points:
        click.echo(f"N={point.n:<4d} F1={point.f1:.4f} (kept {point.selected} instances)")
    click.echo(f"wrote {json_out} and {tsv_out}")


@cli.command("select-patterns")
@_config_options
@click.option("--mode", "mode_opt", type=click.Choice(["random", "most_frequent"]), default=None)
@click.option("-n", "--n", "n", type=int, required=True, help="Patterns kept per class.")
@click.option("--k", "k_opt", type=int, default=None, help="Query-time K for most_frequent.")
@click.option("--output", type=click.Path(dir_okay=False), default=None)
@click.option(
    "--emit-instances",
    type=click.Path(dir_okay=False),
    default=None,
    help="Also write the selected instances as canonical JSONL.",
)
def cmd_select_patterns(config_path, set_items, mode_opt, n, k_opt, output, emit_instances):
    """Materialize a per-class training-pattern selection as an id list."""
    cfg = RunConfig.load(
        config_path, _parse_overrides(set_items, **{"budget.mode": mode_opt})
    )
    mode = cfg.budget.mode
    k = k_opt if k_opt is not None else cfg.budget.k
    train = load_split(cfg, "train").instances
    provider = EmbeddingProvider(cfg.embedding)
    if mode == "random":
        subset = random_pattern_subset(train, n, cfg.seed, cfg.unordered_pairs)
    else:
        dev = load_split(cfg, cfg.budget.split).instances
        store = build_store(
            train,
            [PatternVariant.from_name(cfg.variant)],
            provider,
            source_splits=["train"],
            unordered_pairs=cfg.unordered_pairs,
            substitute_targets_in_plain=cfg.substitute_targets_in_plain,
        )
        engine = _engine(cfg, store, provider, k=k)
        subset = most_frequent_patterns(train, dev, engine, n, k_count=k)
    out = Path(output) if output else _reports_dir(cfg) / f"selected_{mode}_{n}.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as handle:
        handle.write("# config " + json.dumps(cfg.to_dict(), sort_keys=True) + "\n")
        for pi in subset:
            handle.write(pi.id + "\n")
    if emit_instances:
        with Path(emit_instances).open("w", encoding="utf-8") as handle:
            for pi in subset:
                handle.write(json.dumps(instance_to_record(pi.instance)) + "\n")
    click.echo(f"selected {len(subset)} instances ({mode}, n={n}, k={k})")
    click.echo(f"wrote {out}" + (f" and {emit_instances}" if emit_instances else ""))


@cli.command("serve")
@_config_options
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
def cmd_serve(config_path, set_items, host, port):
    """Run the annotation service (API + static UI) over the built index."""
    cfg = RunConfig.load(
        config_path,
        _parse_overrides(set_items, **{"service.host": host, "service.port": port}),
    )
    store = _load_index(cfg)
    provider = EmbeddingProvider(cfg.embedding)
    pool_split = cfg.service.pool_split
    pool = load_split(cfg, pool_split).instances
    known = []
    for split in cfg.data:
        if split != pool_split:
            known.extend(load_split(cfg, split).instances)
    snapshot = cfg.service.snapshot
    kwargs = dict(
        variant=PatternVariant.from_name(cfg.variant),
        k=cfg.service.k,
        extra_labels=cfg.service.extra_labels,
        known_instances=known,
    )
    if snapshot and Path(snapshot).is_file():
        state = restore_state(snapshot, pool, store, provider, **kwargs)
        click.echo(f"restored {len(state.labeled)} labels from {snapshot}")
    else:
        state = AnnotationState(pool, store, provider, **kwargs)
    app = create_app(state, static_dir=cfg.service.ui_dir)
    click.echo(
        f"serving on http://{cfg.service.host}:{cfg.service.port} "
        f"(pool {len(state.pool)}, store entries {store.total_entries()})"
    )
    import uvicorn

    # uvicorn re-raises a captured SIGTERM/SIGINT with the pre-serve handler
    # after shutting down; turn that into SystemExit so the snapshot below is
    # written instead of the process dying on the default disposition.
    def _graceful_exit(signum, frame):
        raise SystemExit(0)

    signal.signal(signal.SIGTERM, _graceful_exit)
    signal.signal(signal.SIGINT, _graceful_exit)
    try:
        uvicorn.run(app, host=cfg.service.host, port=cfg.service.port, log_level="warning")
    except OSError as exc:
        raise BackendError(f"cannot bind {cfg.service.host}:{cfg.service.port}: {exc}") from exc
    finally:
        if snapshot:
            ack = state.export_state(snapshot)
            click.echo(f"state snapshot written to {ack['path']}")


def main(argv=None) -> None:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_INPUT)
    except click.Abort:
        click.echo("aborted", err=True)
        sys.exit(EXIT_INPUT)
    except (
        ConfigError,
        CorpusError,
        IndexFormatError,
        SnapshotError,
        FileNotFoundError,
        ValueError,
        TypeError,
    ) as exc:
        click.echo(f"input error: {exc}", err=True)
        sys.exit(EXIT_INPUT)
    except (EmbeddingError, BackendError) as exc:
        click.echo(f"backend error: {exc}", err=True)
        sys.exit(EXIT_BACKEND)
    except (AssertionError, InvariantViolation) as exc:
        click.echo(f"internal invariant violation: {exc}", err=True)
        sys.exit(EXIT_INTERNAL)
    except Exception as exc:  # noqa: BLE001 - final mapping to exit code 3
        traceback.print_exc()
        click.echo(f"internal error: {exc}", err=True)
        sys.exit(EXIT_INTERNAL)


if __name__ == "__main__":
    main()
