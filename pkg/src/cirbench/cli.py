"""Umbrella command line: mining, pair building, dataset tooling, training,
evaluation, submissions, and the scoring server.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
The ``CIRBENCH_SEED`` environment variable overrides every --seed option.
"""

from __future__ import annotations

import json
import os
import sys
import urllib.request
from pathlib import Path

import click
import numpy as np

from . import composers, dataset as dataset_io, metrics, mining, pairs as pairs_mod
from . import plotting, server as server_mod, training
from .core import (
    DataError,
    FeatureStore,
    NumericalError,
    Subset,
    Vocabulary,
    load_feature_store,
    write_feature_store,
)

SEED_ENV = "CIRBENCH_SEED"


def resolve_seed(value: int) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env is not None else value


def _load_store(features: str, ids: str | None) -> FeatureStore:
    return load_feature_store(features, ids)


def _read_subsets(path: str) -> list[Subset]:
    subsets = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        subsets.append(Subset(
            id=int(obj["id"]),
            members=tuple(obj["members"]),
            seed_similarities=tuple(obj["seed_similarities"]),
        ))
    return subsets


def _load_model(path: str):
    params, vocab = composers.load_checkpoint(path)
    if vocab is None:
        vocab = Vocabulary({"<oov>": 0})
    return params, vocab


@click.group()
def cli():
    """Composed image retrieval benchmark toolkit."""


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--features", required=True, help="Binary feature file.")
@click.option("--ids", default=None, help="Id sidecar (default: features + .ids).")
@click.option("--count", required=True, type=int, help="Subsets to mine.")
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--dup-thresh", default=0.94, type=float, show_default=True,
              help="Near-duplicate cosine threshold.")
@click.option("--gap", default=0.002, type=float, show_default=True,
              help="Minimum similarity drop between kept images.")
@click.option("--window", default=20, type=int, show_default=True,
              help="Candidate window after duplicate removal.")
@click.option("--overlap", default=2, type=int, show_default=True,
              help="Maximum shared members between accepted subsets.")
@click.option("--out", default=None, help="Output JSONL (default: stdout).")
def mine(features, ids, count, seed, dup_thresh, gap, window, overlap, out):
    """Mine similar-image subsets around random seeds."""
    store = _load_store(features, ids)
    cfg = mining.MinerConfig(
        near_duplicate_threshold=dup_thresh, min_gap=gap, candidate_window=window,
        overlap_limit=overlap, rng_seed=resolve_seed(seed),
    )
    subsets = mining.mine_all(store, cfg, count)
    lines = [
        json.dumps({"id": s.id, "members": list(s.members),
                    "seed_similarities": list(s.seed_similarities)})
        for s in subsets
    ]
    text = "\n".join(lines) + ("\n" if lines else "")
    if out:
        Path(out).write_text(text, encoding="utf-8")
        click.echo(f"mined {len(subsets)} subsets -> {out}")
    else:
        click.echo(text, nl=False)


@cli.command()
@click.option("--subsets", "subsets_path", required=True, help="Subsets JSONL.")
@click.option("--out", default=None, help="Output JSONL (default: stdout).")
def pairs(subsets_path, out):
    """Draw the nine directed pairs per subset."""
    lines = []
    for subset in _read_subsets(subsets_path):
        for pair in pairs_mod.draw_pairs(subset):
            lines.append(json.dumps({
                "subset_id": pair.subset_id,
                "reference_rank": pair.reference_rank,
                "target_rank": pair.target_rank,
                "reference": subset.members[pair.reference_rank],
                "target": subset.members[pair.target_rank],
                "kind": pair.kind,
            }))
    text = "\n".join(lines) + ("\n" if lines else "")
    if out:
        Path(out).write_text(text, encoding="utf-8")
        click.echo(f"wrote {len(lines)} pairs -> {out}")
    else:
        click.echo(text, nl=False)


@cli.command()
@click.option("--subsets", "subsets_path", required=True, help="Subsets JSONL.")
@click.option("--ratios", default="0.8,0.1,0.1", show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", default=None, help="Output JSON (default: stdout).")
def split(subsets_path, ratios, seed, out):
    """Assign subsets to train/val/test by connected components."""
    parts = tuple(float(part) for part in ratios.split(","))
    if len(parts) != 3:
        raise click.UsageError("--ratios needs three comma-separated values")
    assignment = pairs_mod.assign_splits(
        _read_subsets(subsets_path), parts, rng_seed=resolve_seed(seed))
    payload = {
        "ratios": list(assignment.ratios),
        "seed": assignment.rng_seed,
        "assignment": {str(sid): name for sid, name
                       in sorted(assignment.by_subset.items())},
    }
    text = json.dumps(payload, indent=2) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
        click.echo(f"assigned {len(assignment.by_subset)} subsets -> {out}")
    else:
        click.echo(text, nl=False)


@cli.command()
@click.option("--files", required=True, multiple=True, help="Dataset JSON files.")
@click.option("--out", default=None, help="CSV output; a chart lands alongside.")
def stats(files, out):
    """Subset/pair/image counts per split."""
    datasets = [dataset_io.read_dataset(path) for path in files]
    rows = dataset_io.dataset_stats(datasets)
    click.echo(dataset_io.format_stats_table(rows))
    if out:
        out = Path(out)
        lines = ["split,subsets,pairs,pairs_per_subset,images"]
        lines += [f"{r.split},{r.subsets},{r.pairs},{r.pairs_per_subset:.2f},{r.images}"
                  for r in rows]
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        figure = plotting.save_stats_chart(rows, out.with_suffix(".png"))
        click.echo(f"wrote {out} and {figure}")


@cli.command("analyze-captions")
@click.option("--files", required=True, multiple=True, help="Dataset JSON files.")
@click.option("--out", default=None, help="Optional JSON output.")
def analyze_captions(files, out):
    """Caption token-length statistics."""
    datasets = [dataset_io.read_dataset(path) for path in files]
    result = dataset_io.caption_length_stats(datasets)
    click.echo(f"captions {result.count}  mean {result.mean:.2f}  "
               f"median {result.median:.1f}  stddev {result.stddev:.2f}")
    if out:
        Path(out).write_text(json.dumps({
            "count": result.count, "mean": result.mean,
            "median": result.median, "stddev": result.stddev,
        }, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Training and model application
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--kind", default="transformer", show_default=True,
              type=click.Choice(composers.COMPOSER_KINDS))
@click.option("--dataset", "dataset_path", required=True)
@click.option("--features", required=True)
@click.option("--ids", default=None)
@click.option("--epochs", default=50, type=int, show_default=True)
@click.option("--batch-size", default=32, type=int, show_default=True)
@click.option("--lr", default=1e-3, type=float, show_default=True)
@click.option("--optimizer", default="adamw", type=click.Choice(["adamw", "sgd"]),
              show_default=True)
@click.option("--negatives", default="corpus", type=click.Choice(["corpus", "in_batch"]),
              show_default=True, help="Negative sampling pool.")
@click.option("--num-negatives", default=1, type=int, show_default=True,
              help="Sampled negatives per positive per step.")
@click.option("--model-dim", default=64, type=int, show_default=True)
@click.option("--ff-dim", default=128, type=int, show_default=True)
@click.option("--layers", default=2, type=int, show_default=True)
@click.option("--heads", default=4, type=int, show_default=True)
@click.option("--preset", default=None, type=click.Choice(["paper"]),
              help="Named hyperparameter preset.")
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", required=True, help="Checkpoint path; trace/summary/figure "
                                           "land alongside.")
def train(kind, dataset_path, features, ids, epochs, batch_size, lr, optimizer,
          negatives, num_negatives, model_dim, ff_dim, layers, heads, preset,
          seed, out):
    """Train a composer with the soft triplet loss."""
    store = _load_store(features, ids)
    data = dataset_io.read_dataset(dataset_path)
    if preset == "paper":
        lr = training.PAPER_PRESET["learning_rate"]
        epochs = training.PAPER_PRESET["epochs"]
        optimizer = training.PAPER_PRESET["optimizer"]
    vocab = Vocabulary.from_captions([r.caption for r in data.labeled()])
    config = composers.ComposerConfig(
        kind=kind, feature_dim=store.dimension, model_dim=model_dim,
        ff_dim=ff_dim, num_layers=layers, num_heads=heads, vocab_size=len(vocab),
    )
    train_cfg = training.TrainConfig(
        epochs=epochs, batch_size=batch_size, learning_rate=lr,
        optimizer=optimizer, negatives=negatives, num_negatives=num_negatives,
        rng_seed=resolve_seed(seed),
    )
    result = training.train(list(data.records), store, config,
                            train_config=train_cfg, vocab=vocab)
    out = Path(out)
    composers.save_checkpoint(result.params, result.vocab, out)
    trace_path = out.with_suffix(".trace.csv")
    training.write_trace_csv(result.trace, trace_path)
    epoch_losses = result.epoch_losses()
    summary = {
        "kind": kind, "epochs": epochs, "steps": len(result.trace),
        "first_epoch_loss": epoch_losses[0] if epoch_losses else None,
        "final_epoch_loss": epoch_losses[-1] if epoch_losses else None,
        "parameters": int(result.params.flat.size),
    }
    out.with_suffix(".summary.json").write_text(
        json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if result.trace:
        plotting.save_loss_curve(result.trace, out.with_suffix(".loss.png"))
    click.echo(f"trained {kind}: {len(result.trace)} steps, "
               f"final epoch loss {summary['final_epoch_loss']}")
    click.echo(f"checkpoint -> {out}")


@cli.command("grad-check")
@click.option("--kind", default="transformer", show_default=True,
              type=click.Choice(composers.COMPOSER_KINDS))
@click.option("--feature-dim", default=24, type=int, show_default=True)
@click.option("--model-dim", default=16, type=int, show_default=True)
@click.option("--ff-dim", default=32, type=int, show_default=True)
@click.option("--layers", default=2, type=int, show_default=True)
@click.option("--heads", default=2, type=int, show_default=True)
@click.option("--vocab-size", default=50, type=int, show_default=True)
@click.option("--tokens", default=5, type=int, show_default=True)
@click.option("--tolerance", default=1e-4, type=float, show_default=True)
@click.option("--seed", default=7, type=int, show_default=True)
def grad_check(kind, feature_dim, model_dim, ff_dim, layers, heads, vocab_size,
               tokens, tolerance, seed):
    """Verify analytic gradients against central finite differences."""
    config = composers.ComposerConfig(
        kind=kind, feature_dim=feature_dim, model_dim=model_dim, ff_dim=ff_dim,
        num_layers=layers, num_heads=heads, vocab_size=vocab_size,
        max_tokens=max(tokens, 8),
    )
    report = training.grad_check(config, tolerance=tolerance,
                                 num_tokens=tokens, rng_seed=resolve_seed(seed))
    click.echo(report.to_table())
    if not report.passed():
        raise NumericalError(
            f"gradient check failed: worst relative error {report.worst:.3e}"
        )


@cli.command()
@click.option("--model", required=True, help="Composer checkpoint.")
@click.option("--features", required=True)
@click.option("--ids", default=None)
@click.option("--dataset", "dataset_path", required=True)
@click.option("--out", required=True, help="Composed feature file.")
@click.option("--seed", default=0, type=int, show_default=True,
              help="Substitution seed for random_image_text models.")
def embed(model, features, ids, dataset_path, out, seed):
    """Compose every query and write the features as a feature file."""
    store = _load_store(features, ids)
    params, vocab = _load_model(model)
    data = dataset_io.read_dataset(dataset_path)
    records = list(data.records)
    composed = metrics.compose_queries(
        params, vocab, store, records,
        substitute_rng=np.random.default_rng(resolve_seed(seed)))
    out_store = FeatureStore(
        [f"pair-{record.pair_id}" for record in records],
        composed.astype(np.float32),
    )
    write_feature_store(out_store, out)
    click.echo(f"composed {len(records)} queries -> {out}")


@cli.command()
@click.option("--model", required=True)
@click.option("--features", required=True)
@click.option("--ids", default=None)
@click.option("--dataset", "dataset_path", required=True)
@click.option("--pool", default="subset", show_default=True,
              type=click.Choice(["global", "subset"]))
@click.option("--depth", default=50, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", default=None, help="Rankings JSONL (default: stdout).")
def retrieve(model, features, ids, dataset_path, pool, depth, seed, out):
    """Per-query ranked candidate lists."""
    store = _load_store(features, ids)
    params, vocab = _load_model(model)
    data = dataset_io.read_dataset(dataset_path)
    submission = server_mod.make_submission(
        params, vocab, store, data, depth=depth,
        substitute_seed=resolve_seed(seed))
    rankings = (submission.global_rankings if pool == "global"
                else submission.subset_rankings)
    lines = []
    for record in data.records:
        ranked = rankings[record.pair_id]
        gold_rank = None
        if record.target_hard is not None and record.target_hard in ranked:
            gold_rank = ranked.index(record.target_hard) + 1
        lines.append(json.dumps({
            "pairid": record.pair_id, "ranking": ranked, "gold_rank": gold_rank,
        }))
    text = "\n".join(lines) + ("\n" if lines else "")
    if out:
        Path(out).write_text(text, encoding="utf-8")
        click.echo(f"wrote {len(lines)} rankings -> {out}")
    else:
        click.echo(text, nl=False)


@cli.command("eval")
@click.option("--model", required=True)
@click.option("--features", required=True)
@click.option("--ids", default=None)
@click.option("--dataset", "dataset_path", required=True)
@click.option("--pool", default="both", show_default=True,
              type=click.Choice(["global", "subset", "both"]))
@click.option("--k", default="1,5,10,50", show_default=True,
              help="Global recall cutoffs.")
@click.option("--subset-k", default="1,2,3", show_default=True)
@click.option("--include-reference", is_flag=True,
              help="Keep the reference image in the global pool.")
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", default=None,
              help="Report JSON; a text table and chart land alongside.")
def eval_cmd(model, features, ids, dataset_path, pool, k, subset_k,
             include_reference, seed, out):
    """Evaluate a composer checkpoint on a labeled dataset."""
    store = _load_store(features, ids)
    params, vocab = _load_model(model)
    data = dataset_io.read_dataset(dataset_path)
    report = metrics.evaluate_dataset(
        list(data.records), store, params, vocab, pool=pool,
        global_ks=tuple(int(part) for part in k.split(",")),
        subset_ks=tuple(int(part) for part in subset_k.split(",")),
        include_reference=include_reference,
        substitute_seed=resolve_seed(seed),
    )
    click.echo(report.to_table())
    if out:
        out = Path(out)
        out.write_text(json.dumps(report.to_payload(), indent=2) + "\n",
                       encoding="utf-8")
        out.with_suffix(".txt").write_text(report.to_table() + "\n", encoding="utf-8")
        figure = plotting.save_metric_chart(report, out.with_suffix(".png"))
        click.echo(f"wrote {out}, {out.with_suffix('.txt')}, {figure}")


# ---------------------------------------------------------------------------
# Submissions and server
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--model", required=True)
@click.option("--features", required=True)
@click.option("--ids", default=None)
@click.option("--dataset", "dataset_path", required=True)
@click.option("--depth", default=50, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", required=True, help="Submission JSON.")
@click.option("--url", default=None, help="Scoring server base URL; when set "
                                          "the submission is posted after writing.")
def submit(model, features, ids, dataset_path, depth, seed, out, url):
    """Build (and optionally post) a submission file."""
    store = _load_store(features, ids)
    params, vocab = _load_model(model)
    data = dataset_io.read_dataset(dataset_path)
    submission = server_mod.make_submission(
        params, vocab, store, data, depth=depth,
        substitute_seed=resolve_seed(seed))
    submission.save(out)
    click.echo(f"submission for {len(data.records)} pairs -> {out}")
    if url:
        body = json.dumps(submission.to_payload()).encode("utf-8")
        request = urllib.request.Request(
            url.rstrip("/") + "/v1/submit", data=body,
            headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(request) as response:
            click.echo(response.read().decode("utf-8"))


@cli.command()
@click.option("--dataset", "dataset_path", required=True,
              help="Fully labeled gold dataset.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, type=int, show_default=True)
def serve(dataset_path, host, port):
    """Run the hidden-label scoring service."""
    gold = dataset_io.read_dataset(dataset_path)
    click.echo(f"serving {len(gold.records)} gold pairs on http://{host}:{port}")
    server_mod.serve(gold, host, port)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="cirbench", standalone_mode=False)
    except click.exceptions.Exit as err:
        return int(err.exit_code)
    except click.UsageError as err:
        err.show(file=sys.stderr)
        return 1
    except click.ClickException as err:
        err.show(file=sys.stderr)
        return 2
    except NumericalError as err:
        click.echo(f"numerical failure: {err}", err=True)
        return 3
    except DataError as err:
        click.echo(f"data error: {err}", err=True)
        return 2
    except FileNotFoundError as err:
        click.echo(f"data error: {err}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
