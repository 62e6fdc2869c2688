"""Command-line entry points: run the pipeline, train the gate filters,
build corpora, move graphs around, generate reports, serve reviewers.

Configuration comes from a single YAML file; a handful of flags override
file values (precedence: flags > file > defaults). Commands exit nonzero on
fatal errors and write outputs only inside their output directories.
"""

from __future__ import annotations

import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import click
import yaml

from . import __version__, filtering, lotus, pipeline, report
from .backends import build_backend, load_prompt
from .kg import KnowledgeGraph
from .literature import Document, DocumentRef

EXIT_FATAL = 1


class LockHeld(click.ClickException):
    exit_code = EXIT_FATAL


@contextmanager
def graph_lock(graph_path: Path):
    """Single-writer lock: `<graph>.lock` created exclusively, removed on exit.

    `run` and `serve` both take it, so they cannot share a graph file."""
    lock_path = Path(str(graph_path) + ".lock")
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        descriptor = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeld(
            f"{graph_path} is locked by another process (remove {lock_path} "
            f"if that process is gone)")
    try:
        os.write(descriptor, str(os.getpid()).encode())
        os.close(descriptor)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def load_config(path: str, overrides: dict) -> pipeline.PipelineConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise click.ClickException(f"unreadable config {path}: {exc}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = pipeline.PipelineConfig.from_dict(raw)
        config.validate()
    except pipeline.ConfigError as exc:
        raise click.ClickException(str(exc))
    return config


def read_identifications(path: str) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line.strip() for line in lines if line.strip() and not line.startswith("#")]


@click.group()
@click.version_option(__version__)
def main():
    """Rediscovery alarm for antibiotic natural products."""


@main.command(name="run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="YAML pipeline configuration.")
@click.option("--identifications", "idents_path", required=True,
              type=click.Path(exists=True), help="One organism identification per line.")
@click.option("--run-dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--ablation", type=click.Choice([m.value for m in pipeline.AblationMode]),
              default=None, help="Override the configured ablation mode.")
@click.option("--parallelism", type=int, default=None)
@click.option("--run-id", default=None, help="Pin the run id (reproducible manifests).")
def run_command(config_path, idents_path, run_dir, ablation, parallelism, run_id):
    """Execute the full pipeline over a list of identifications."""
    config = load_config(config_path, {"ablation": ablation, "parallelism": parallelism})
    identifications = read_identifications(idents_path)
    with graph_lock(Path(run_dir) / pipeline.KG_EXPORT):
        try:
            graph, manifest = pipeline.run(identifications, config, run_dir, run_id=run_id)
        except pipeline.PipelineError as exc:
            raise click.ClickException(str(exc))
    click.echo(f"run {manifest.run_id}: {len(identifications)} identifications, "
               f"{graph.counts_by_kind()} nodes, {len(manifest.failures)} failures")


@main.command()
@click.option("--run-dir", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Must match the original configuration digest.")
def resume(run_dir, config_path):
    """Continue an interrupted run from its checkpoints."""
    config = load_config(config_path, {}) if config_path else None
    with graph_lock(Path(run_dir) / pipeline.KG_EXPORT):
        try:
            graph, manifest = pipeline.resume(run_dir, config=config)
        except pipeline.PipelineError as exc:
            raise click.ClickException(str(exc))
    click.echo(f"run {manifest.run_id} resumed: completed={manifest.completed}")


def _read_corpus(path: str) -> list[filtering.LabeledExample]:
    examples = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        label, _, text = line.partition("\t")
        try:
            examples.append(filtering.LabeledExample(
                text=text, label=filtering.Label(label)))
        except ValueError:
            raise click.ClickException(f"{path}:{line_no}: bad corpus line")
    return examples


def _write_corpus(examples, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for example in examples:
            text = " ".join(example.text.split())
            handle.write(f"{example.label.value}\t{text}\n")


@main.command(name="train-filter")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True),
              help="Labelled corpus: <label><TAB><text> per line.")
@click.option("--output", "output_path", required=True, type=click.Path())
@click.option("--alpha", type=float, default=1.0, show_default=True)
@click.option("--threshold", type=float, default=0.5, show_default=True,
              help="Positive-posterior cut; the pipeline gates lean to 0.3.")
@click.option("--seed", type=int, default=13, show_default=True)
@click.option("--heldout-fraction", type=float, default=0.2, show_default=True)
def train_filter(corpus_path, output_path, alpha, threshold, seed, heldout_fraction):
    """Train a gate classifier and print held-out metrics."""
    corpus = _read_corpus(corpus_path)
    try:
        if heldout_fraction > 0:
            train_set, heldout = filtering.stratified_split(corpus, heldout_fraction, seed)
        else:
            train_set, heldout = list(corpus), []
        model = filtering.train(train_set, alpha=alpha, threshold=threshold,
                                split_seed=seed)
    except (filtering.FilterError, ValueError) as exc:
        raise click.ClickException(str(exc))
    filtering.save_model(model, output_path)
    if heldout:
        metrics = filtering.evaluate(model, heldout)
        click.echo(f"heldout n={len(heldout)} recall={metrics.recall:.3f} "
                   f"precision={metrics.precision:.3f} f1={metrics.f1:.3f} "
                   f"f2={metrics.f2:.3f}")
    click.echo(f"model written to {output_path}")


def _read_documents(path: str) -> list[Document]:
    documents = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            documents.append(Document(
                ref=DocumentRef(pmid=raw.get("pmid"), doi=raw.get("doi")),
                title=raw.get("title", ""),
                abstract=raw.get("abstract"),
                pub_year=raw.get("pub_year"),
                mesh_terms=raw.get("mesh_terms", []),
            ))
        except (json.JSONDecodeError, ValueError) as exc:
            raise click.ClickException(f"{path}:{line_no}: bad document record: {exc}")
    return documents


@main.group(name="build-corpus")
def build_corpus():
    """Construct training corpora for the gate classifiers."""


@build_corpus.command(name="mesh")
@click.option("--documents", "documents_path", required=True, type=click.Path(exists=True),
              help="Documents as JSON lines with pmid, title, abstract, mesh_terms.")
@click.option("--mesh-tree", "tree_path", required=True, type=click.Path(exists=True),
              help="descriptor id <TAB> tree number, one per line.")
@click.option("--descriptor", required=True,
              help="Target descriptor; narrower descriptors count as positive.")
@click.option("--per-class", type=int, default=None)
@click.option("--seed", type=int, default=13, show_default=True)
@click.option("--output", "output_path", required=True, type=click.Path())
def build_corpus_mesh(documents_path, tree_path, descriptor, per_class, seed, output_path):
    """Derive activity labels from the descriptor hierarchy."""
    documents = _read_documents(documents_path)
    tree = filtering.MeshTree.load(tree_path)
    try:
        corpus = filtering.build_mesh_activity_corpus(
            documents, tree, descriptor, per_class=per_class, seed=seed)
    except filtering.FilterError as exc:
        raise click.ClickException(str(exc))
    _write_corpus(corpus, Path(output_path))
    click.echo(f"{len(corpus)} examples written to {output_path}")


@build_corpus.command(name="pseudo")
@click.option("--documents", "documents_path", required=True, type=click.Path(exists=True))
@click.option("--backend-config", "backend_path", required=True, type=click.Path(exists=True),
              help="JSON backend entry (kind, script or endpoint, ...).")
@click.option("--output", "output_path", required=True, type=click.Path())
def build_corpus_pseudo(documents_path, backend_path, output_path):
    """Label abstracts with a backend: does the text report an isolation?"""
    documents = _read_documents(documents_path)
    backend = build_backend(json.loads(Path(backend_path).read_text(encoding="utf-8")))
    result = filtering.build_pseudo_label_corpus(documents, backend,
                                                 load_prompt("pseudo_label"))
    _write_corpus(result.examples, Path(output_path))
    click.echo(f"{len(result.examples)} examples written to {output_path} "
               f"({result.skipped} skipped)")


@main.group()
def kg():
    """Move knowledge graphs in and out of the line-delimited store format."""


@kg.command(name="export")
@click.argument("graph_path", type=click.Path(exists=True))
@click.argument("output_path", type=click.Path())
def kg_export(graph_path, output_path):
    """Validate a graph file and write it in canonical order."""
    try:
        graph = KnowledgeGraph.import_(graph_path)
    except Exception as exc:
        raise click.ClickException(str(exc))
    graph.export(output_path)
    click.echo(f"{sum(graph.counts_by_kind().values())} nodes exported to {output_path}")


@kg.command(name="import")
@click.argument("input_path", type=click.Path(exists=True))
@click.argument("graph_path", type=click.Path())
def kg_import(input_path, graph_path):
    """Validate an export file and install it as a graph store."""
    try:
        graph = KnowledgeGraph.import_(input_path)
    except Exception as exc:
        raise click.ClickException(str(exc))
    with graph_lock(Path(graph_path)):
        graph.export(graph_path)
    click.echo(f"graph installed at {graph_path}")


@main.group(name="report")
def report_group():
    """Evaluation reports over a populated graph."""


def _load_graph(path: str) -> KnowledgeGraph:
    try:
        return KnowledgeGraph.import_(path)
    except Exception as exc:
        raise click.ClickException(str(exc))


@report_group.command(name="compare")
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--triples", "triples_path", required=True, type=click.Path(exists=True))
@click.option("--aliases", "aliases_path", type=click.Path(exists=True), default=None)
@click.option("--output-dir", required=True, type=click.Path())
def report_compare(graph_path, triples_path, aliases_path, output_dir):
    """Score reviewer evidence triples against the graph."""
    graph = _load_graph(graph_path)
    try:
        triples = report.load_expert_triples(triples_path)
    except report.ReportError as exc:
        raise click.ClickException(str(exc))
    aliases = report.load_aliases(aliases_path) if aliases_path else None
    statuses, summary = report.compare_with_reference(graph, triples, aliases=aliases)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "triple_status.tsv", "w", encoding="utf-8") as handle:
        handle.write("organism\tchemical\tre\tlotus\tsystem_level\tdiagnostics\n")
        for status in statuses:
            handle.write("\t".join((
                status.triple.organism, status.triple.chemical,
                "yes" if status.relation_found_re else "no",
                "yes" if status.relation_found_lotus else "no",
                status.system_level.value,
                "; ".join(status.diagnostics),
            )) + "\n")
    (out / "summary.json").write_text(json.dumps({
        "total": summary.total, "retrieved": summary.retrieved,
        "retrieved_re": summary.retrieved_re, "missed": summary.missed,
    }, indent=2, sort_keys=True), encoding="utf-8")
    click.echo(f"{summary.total} triples: {summary.missed} missed, "
               f"{summary.retrieved} retrieved ({summary.retrieved_re} via extraction)")


@report_group.command(name="alerts")
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--organisms", "organisms_path", required=True, type=click.Path(exists=True),
              help="Organism names, one per line.")
@click.option("--output-dir", required=True, type=click.Path())
def report_alerts(graph_path, organisms_path, output_dir):
    """Per-organism alert distribution table plus plot-ready series."""
    graph = _load_graph(graph_path)
    organisms = read_identifications(organisms_path)
    distribution = report.alert_distribution_report(graph, organisms)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "alerts.tsv", "w", encoding="utf-8") as handle:
        handle.write("organism\tcl_strong\tcl_medium\tcl_weak"
                     "\tol_strong\tol_medium\tol_weak\n")
        for row in distribution.rows:
            handle.write("\t".join([row["organism"]] + [
                str(row[kind][level])
                for kind in ("CL", "OL") for level in ("Strong", "Medium", "Weak")
            ]) + "\n")
    (out / "alerts_series.json").write_text(
        json.dumps(distribution.series(), indent=2, sort_keys=True), encoding="utf-8")
    click.echo(f"alert distribution for {len(organisms)} organisms written to {out}")


@report_group.command(name="biblio")
@click.option("--lotus-dump", "dump_path", required=True, type=click.Path(exists=True))
@click.option("--names", "names_path", type=click.Path(exists=True), default=None,
              help="Restrict to these organism names (default: whole dump).")
@click.option("--output-dir", required=True, type=click.Path())
def report_biblio(dump_path, names_path, output_dir):
    """Publication-year histogram and PubMed-indexed fraction of references."""
    names = set(read_identifications(names_path)) if names_path else None
    try:
        relations = lotus.load_dump(dump_path, names)
    except lotus.LotusError as exc:
        raise click.ClickException(str(exc))
    biblio = report.bibliometrics(relations)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "biblio.tsv", "w", encoding="utf-8") as handle:
        handle.write("year\treferences\n")
        for year, count in biblio.stats.year_histogram.items():
            handle.write(f"{year}\t{count}\n")
        handle.write(f"unknown\t{biblio.stats.unknown_years}\n")
    (out / "biblio_series.json").write_text(
        json.dumps(biblio.series(), indent=2, sort_keys=True), encoding="utf-8")
    fraction = biblio.stats.pmid_indexed_fraction
    click.echo(f"{biblio.stats.total} references, pmid-indexed fraction: "
               f"{'n/a' if fraction is None else f'{fraction:.2f}'}")


@main.command()
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8321, show_default=True)
@click.option("--token", default="review", show_default=True,
              help="Shared reviewer token for opening sessions.")
@click.option("--runs-dir", type=click.Path(exists=True), default=None,
              help="Directory of run directories for run-status queries.")
@click.option("--ui-dir", type=click.Path(exists=True), default=None,
              help="Static dashboard assets to serve at /.")
def serve(graph_path, host, port, token, runs_dir, ui_dir):
    """Serve the reviewer API (and optionally the dashboard) over a graph."""
    from .api import create_app, directory_run_status

    with graph_lock(Path(graph_path)):
        graph = _load_graph(graph_path)
        run_status = directory_run_status(runs_dir) if runs_dir else None
        app = create_app(graph, shared_token=token, run_status=run_status)
        if ui_dir:
            from fastapi.staticfiles import StaticFiles
            app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
        import uvicorn
        click.echo(f"serving {graph_path} on http://{host}:{port}")
        uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
