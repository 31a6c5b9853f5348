"""``gkr`` command-line interface.

Exit codes: 0 success, 1 validation error (bad flag, unreadable or malformed
file), 2 numeric failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from pathlib import Path

import click

from . import __version__, gkrnet
from .data import (
    PairSetError,
    ParseError,
    SynthSpec,
    complete_pairset,
    gen_synthetic,
    read_features,
    read_pairs,
    write_features,
    write_pairs,
)
from .diffmath import DomainError, ShapeError, UsageError
from .trainer import (
    MODEL_KINDS,
    NumericError,
    TrainConfig,
    ablate,
    crossval,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

OUTPUT_ENV = "GKR_OUTPUT_DIR"
CONTEXT = {"max_content_width": 88, "terminal_width": 88, "help_option_names": ["-h", "--help"]}

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

FEATURES_SCHEMA = """\b
features CSV: header `id,role,f0,...,f{D-1}`; one row per
  individual; role is `parent` or `child`; ids unique; values
  finite decimals."""

PAIRS_SCHEMA = """\b
pairs CSV: header `parent_id,child_id,label,fold[,relation]`;
  label 1 = kin, 0 = non-kin; fold in 1..5 (may be empty when
  --assign-folds is given and the file lists positives only);
  relation is F-S, F-D, M-S, M-D or synthetic (default)."""

CONFIG_SCHEMA = """\b
run config JSON (every key optional; flags override the file):
  {"model": {"kind": "gkr", "layer_dims": [512, 4],
             "central_init": 0.5, "aggregator": "max",
             "readout_hidden": null, "bias": false},
   "encoder": {"kind": "identity"}
            | {"kind": "shared_mlp", "hidden": [..],
               "output_dim": D'},
   "lr": 0.0005, "batch_size": 16, "epochs": 100, "seed": 0,
   "resample_negatives": false, "precision": "float64",
   "data": {"features": PATH, "pairs": PATH}}
  model.kind is gkr, cosine, mlp or metric; mlp takes
  "hidden", metric takes "rank"."""

REPORT_SCHEMA = """\b
report JSON: schema_version, config echo, per-fold accuracy,
  confusion counts, per-relation accuracy, train-loss history,
  size-weighted mean accuracy. Wall-clock time is printed, not
  stored, so reruns give byte-identical files."""


log = logging.getLogger("gkr")


def _out_dir(value: str | None) -> Path:
    path = Path(value or os.environ.get(OUTPUT_ENV) or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _int_list(text: str, flag: str) -> tuple[int, ...]:
    try:
        values = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError(f"{flag} is empty")
    return values


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return doc


def _build_config(
    config_path,
    kind=None,
    layer_dims=None,
    central_init=None,
    aggregator=None,
    encoder_hidden=None,
    encoder_dim=None,
    lr=None,
    batch_size=None,
    epochs=None,
    seed=None,
    resample_negatives=None,
) -> tuple[TrainConfig, dict]:
    """Defaults < config file < flags."""
    doc = _load_config(config_path)
    data = doc.pop("data", {}) or {}
    model = dict(doc.get("model", {"kind": "gkr"}))
    if kind is not None and kind != model.get("kind"):
        model = {"kind": kind}
    if layer_dims is not None:
        model["layer_dims"] = list(_int_list(layer_dims, "--layer-dims"))
    if central_init is not None:
        model["central_init"] = central_init
    if aggregator is not None:
        model["aggregator"] = aggregator
    doc["model"] = model
    if encoder_dim is not None:
        hidden = list(_int_list(encoder_hidden, "--encoder-hidden")) if encoder_hidden else []
        doc["encoder"] = {"kind": "shared_mlp", "hidden": hidden, "output_dim": encoder_dim}
    elif encoder_hidden is not None:
        raise UsageError("--encoder-hidden needs --encoder-dim")
    for key, value in (
        ("lr", lr),
        ("batch_size", batch_size),
        ("epochs", epochs),
        ("seed", seed),
        ("resample_negatives", resample_negatives),
    ):
        if value is not None:
            doc[key] = value
    return TrainConfig.from_dict(doc), data


def _load_data(features: str | None, pairs: str | None, data: dict, assign_folds: bool, seed: int):
    features = features or data.get("features")
    pairs = pairs or data.get("pairs")
    if not features or not pairs:
        raise UsageError("need --features and --pairs (or data.features / data.pairs in the config)")
    table = read_features(features)
    pairset = read_pairs(pairs, table, allow_missing_folds=assign_folds)
    if assign_folds or not pairset.negatives:
        pairset = complete_pairset(pairset, seed)
        pairset.validate(table)
    return table, pairset


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _model_options(f):
    options = [
        click.option("--model", "kind", type=click.Choice(MODEL_KINDS), help="Model kind (default gkr)."),
        click.option("--layer-dims", help="GKR feature sizes per layer, e.g. 512,4."),
        click.option("--central-init", help="GKR central-node init: mean, max or a constant."),
        click.option("--aggregator", type=click.Choice(["mean", "max"]), help="GKR pooling at the central node."),
        click.option("--encoder-dim", type=click.IntRange(min=1), help="Use a shared MLP encoder with this output dim."),
        click.option("--encoder-hidden", help="Hidden sizes of the shared encoder, e.g. 32,32."),
        click.option("--lr", type=click.FloatRange(min=0), help="Adam learning rate (default 0.0005)."),
        click.option("--batch-size", type=click.IntRange(min=1), help="Mini-batch size (default 16)."),
        click.option("--epochs", type=click.IntRange(min=0), help="Training epochs (default 100)."),
        click.option("--seed", type=int, help="Seed for init, shuffling and negative draws."),
        click.option(
            "--resample-negatives/--fixed-negatives",
            default=None,
            help="Redraw the negatives every epoch (default fixed).",
        ),
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run config JSON."),
        click.option("--features", type=click.Path(dir_okay=False), help="Features CSV."),
        click.option("--pairs", type=click.Path(dir_okay=False), help="Pairs CSV."),
        click.option(
            "--assign-folds",
            is_flag=True,
            help="Assign folds (and draw negatives) for a positives-only pairs file.",
        ),
    ]
    for opt in reversed(options):
        f = opt(f)
    return f


def _config_from(kw: dict) -> tuple[TrainConfig, dict]:
    return _build_config(
        kw["config_path"],
        kind=kw["kind"],
        layer_dims=kw["layer_dims"],
        central_init=kw["central_init"],
        aggregator=kw["aggregator"],
        encoder_hidden=kw["encoder_hidden"],
        encoder_dim=kw["encoder_dim"],
        lr=kw["lr"],
        batch_size=kw["batch_size"],
        epochs=kw["epochs"],
        seed=kw["seed"],
        resample_negatives=kw["resample_negatives"],
    )


@click.group(context_settings=CONTEXT, epilog=f"Outputs go to --out, else ${OUTPUT_ENV}, else the current directory.")
@click.version_option(__version__, "--version")
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug).")
def cli(verbose: int) -> None:
    """Graph-based kinship reasoning: train and compare pair verifiers."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@cli.command("synth-gen", epilog=FEATURES_SCHEMA + "\n\n" + PAIRS_SCHEMA)
@click.option("--families", type=click.IntRange(min=2), default=500, show_default=True, help="Parent/child families.")
@click.option("--genome-dim", type=click.IntRange(min=1), default=8, show_default=True, help="Latent genome size G.")
@click.option("--dim", type=click.IntRange(min=1), default=16, show_default=True, help="Observed feature size D.")
@click.option("--rho", type=click.FloatRange(0, 1), default=0.8, show_default=True, help="Heritability.")
@click.option("--sigma", type=click.FloatRange(min=0), default=0.3, show_default=True, help="Observation noise.")
@click.option(
    "--flip-fraction",
    type=click.FloatRange(0, 1),
    default=0.25,
    show_default=True,
    help="Fraction of traits expressed with opposite sign in the child.",
)
@click.option(
    "--map-coupling",
    type=click.FloatRange(0, 1),
    default=1.0,
    show_default=True,
    help="1 = child map equals parent map (up to flips), 0 = independent.",
)
@click.option("--folds", type=click.IntRange(2, 5), default=5, show_default=True, help="Number of folds.")
@click.option("--seed", type=int, default=0, show_default=True, help="Sampling seed.")
@click.option("--mixing-seed", type=int, help="Seed for the mixing maps (default: --seed).")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
def synth_gen(families, genome_dim, dim, rho, sigma, flip_fraction, map_coupling, folds, seed, mixing_seed, out):
    """Write a synthetic heritable-trait task as features.csv + pairs.csv."""
    spec = SynthSpec(
        families=families,
        genome_dim=genome_dim,
        dim=dim,
        rho=rho,
        sigma=sigma,
        seed=seed,
        mixing_seed=mixing_seed,
        map_coupling=map_coupling,
        flip_fraction=flip_fraction,
    )
    table, pairset = gen_synthetic(spec, folds=folds)
    out = _out_dir(out)
    write_features(out / "features.csv", table)
    write_pairs(out / "pairs.csv", pairset)
    # read back so a bad write never goes unnoticed
    read_pairs(out / "pairs.csv", read_features(out / "features.csv"))
    click.echo(f"wrote {out / 'features.csv'} ({len(table)} rows) and {out / 'pairs.csv'} ({len(pairset.pairs)} pairs)")


@cli.command("train", epilog=CONFIG_SCHEMA + "\n\n" + FEATURES_SCHEMA + "\n\n" + PAIRS_SCHEMA)
@_model_options
@click.option("--train-folds", help="Comma-separated folds to train on (default: all pairs).")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
def train_cmd(train_folds, out, **kw):
    """Train one model; writes checkpoint.json and train_report.json."""
    config, data = _config_from(kw)
    table, pairset = _load_data(kw["features"], kw["pairs"], data, kw["assign_folds"], config.seed)
    folds = list(_int_list(train_folds, "--train-folds")) if train_folds else None
    if folds:
        missing = sorted(set(folds) - set(pairset.folds))
        if missing:
            raise UsageError(f"--train-folds: fold(s) {missing} not present in the pairs file")
    model, params, report = train(config, pairset, table, folds)
    out = _out_dir(out)
    save_checkpoint(out / "checkpoint.json", model, params)
    _write_text(out / "train_report.json", json.dumps(report.to_dict(), indent=2) + "\n")
    click.echo(
        f"train loss {report.initial_loss:.4f} -> {report.final_loss:.4f}, "
        f"train accuracy {report.history[-1].accuracy:.1%} ({report.wall_seconds:.1f} s)"
    )
    click.echo(f"wrote {out / 'checkpoint.json'} and {out / 'train_report.json'}")


@cli.command("eval", epilog=FEATURES_SCHEMA + "\n\n" + PAIRS_SCHEMA)
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True, help="checkpoint.json from train.")
@click.option("--features", type=click.Path(dir_okay=False), required=True, help="Features CSV.")
@click.option("--pairs", type=click.Path(dir_okay=False), required=True, help="Pairs CSV.")
@click.option("--folds", "fold_list", help="Comma-separated folds to evaluate (default: all pairs).")
@click.option("--threshold", type=click.FloatRange(0, 1), default=0.5, show_default=True, help="Kin if p >= threshold.")
@click.option("--out", type=click.Path(file_okay=False), help="Also write eval.json here.")
def eval_cmd(checkpoint, features, pairs, fold_list, threshold, out):
    """Accuracy and confusion counts of a trained model."""
    model, params = load_checkpoint(checkpoint)
    table = read_features(features)
    pairset = read_pairs(pairs, table, allow_missing_folds=True)
    if table.dim != model.input_dim:
        raise UsageError(f"{features}: features have dim {table.dim} but the checkpoint expects {model.input_dim}")
    chosen = pairset.in_folds(_int_list(fold_list, "--folds")) if fold_list else pairset.pairs
    if not chosen:
        raise UsageError("no pairs selected for evaluation")
    metrics = evaluate(model, params, chosen, table, threshold)
    click.echo(f"accuracy {metrics.accuracy:.4f} on {metrics.n} pairs (tp {metrics.tp}, fp {metrics.fp}, tn {metrics.tn}, fn {metrics.fn})")
    for rel, d in metrics.per_relation.items():
        click.echo(f"  {rel}: {d['accuracy']:.4f} ({d['n']} pairs)")
    if out:
        path = _out_dir(out) / "eval.json"
        _write_text(path, json.dumps({"schema_version": 1, "kind": "eval", **metrics.to_dict()}, indent=2) + "\n")
        click.echo(f"wrote {path}")


@cli.command("crossval", epilog=CONFIG_SCHEMA + "\n\n" + REPORT_SCHEMA)
@_model_options
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
def crossval_cmd(out, **kw):
    """5-fold cross-validation; writes report.json and table.txt."""
    config, data = _config_from(kw)
    table, pairset = _load_data(kw["features"], kw["pairs"], data, kw["assign_folds"], config.seed)
    report = crossval(config, pairset, table)
    out = _out_dir(out)
    _write_text(out / "report.json", report.to_json())
    text = report.render()
    _write_text(out / "table.txt", text)
    click.echo(text, nl=False)
    click.echo(f"wrote {out / 'report.json'} and {out / 'table.txt'}")


@cli.command("ablate", epilog=CONFIG_SCHEMA + "\n\n" + REPORT_SCHEMA)
@_model_options
@click.option("--grid-central-init", help="Central inits to compare, e.g. mean,max,0,0.5,1.")
@click.option("--grid-aggregator", help="Aggregators to compare, e.g. mean,max.")
@click.option("--grid-kind", help="Model kinds to compare, e.g. cosine,mlp,gkr.")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
def ablate_cmd(grid_central_init, grid_aggregator, grid_kind, out, **kw):
    """Cross-validate every cell of a grid; writes ablation.json and table.txt."""
    config, data = _config_from(kw)
    grid = {}
    if grid_central_init:
        grid["central_init"] = [gkrnet.parse_central_init(v) for v in _str_list(grid_central_init)]
    if grid_aggregator:
        grid["aggregator"] = _str_list(grid_aggregator)
        bad = [a for a in grid["aggregator"] if a not in gkrnet.AGGREGATORS]
        if bad:
            raise UsageError(f"--grid-aggregator: unknown aggregator(s) {', '.join(bad)}; use mean, max")
    if grid_kind:
        grid["kind"] = _str_list(grid_kind)
        bad = [k for k in grid["kind"] if k not in MODEL_KINDS]
        if bad:
            raise UsageError(f"--grid-kind: unknown kind(s) {', '.join(bad)}; use {', '.join(MODEL_KINDS)}")
    if not grid:
        raise UsageError("give at least one of --grid-central-init, --grid-aggregator, --grid-kind")
    table, pairset = _load_data(kw["features"], kw["pairs"], data, kw["assign_folds"], config.seed)
    start = time.perf_counter()
    result = ablate(config, grid, pairset, table)
    out = _out_dir(out)
    _write_text(out / "ablation.json", result.to_json())
    text = result.render()
    _write_text(out / "table.txt", text)
    click.echo(text, nl=False)
    click.echo(f"wall clock: {time.perf_counter() - start:.1f} s")
    click.echo(f"wrote {out / 'ablation.json'} and {out / 'table.txt'}")


@cli.command()
@click.option(
    "--dims",
    default="4,2,3,2",
    show_default=True,
    help="D,F0,F1,...,FK: feature dim, node input size (must be 2), then per-layer sizes.",
)
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for params and inputs.")
@click.option("--central-init", help="Check one central init (default: mean, max, 0, 0.5, 1).")
@click.option("--aggregator", type=click.Choice(["mean", "max"]), help="Check one aggregator (default: both).")
@click.option("--tolerance", type=float, default=1e-5, show_default=True, help="Pass if max error < tolerance.")
def gradcheck(dims, seed, central_init, aggregator, tolerance):
    """Compare reverse-mode gradients of the GKR loss with finite differences.

    Error per coordinate is |g_ad - g_fd| / max(1, |g_ad| + |g_fd|); exits 2
    if the maximum reaches the tolerance.
    """
    sizes = _int_list(dims, "--dims")
    if len(sizes) < 3:
        raise UsageError("--dims needs D, F0 and at least one layer size")
    if sizes[1] != gkrnet.NODE_INPUT_DIM:
        raise UsageError(f"--dims: F0 is the node input size and must be {gkrnet.NODE_INPUT_DIM}, got {sizes[1]}")
    inits = [gkrnet.parse_central_init(central_init)] if central_init else list(gkrnet.CENTRAL_INIT_VARIANTS)
    aggs = [aggregator] if aggregator else list(gkrnet.AGGREGATORS)
    worst = 0.0
    for c in inits:
        for a in aggs:
            cfg = gkrnet.GkrConfig(dim=sizes[0], layer_dims=sizes[2:], central_init=c, aggregator=a)
            rep = gkrnet.gradient_check(cfg, seed, tolerance=tolerance)
            worst = max(worst, rep.max_rel_error)
            click.echo(
                f"central_init={gkrnet.central_init_label(c):<4} aggregator={a:<4} "
                f"max rel error {rep.max_rel_error:.3e} over {rep.n_coords} coords"
                + (f" ({rep.kink_retries} kink shifts)" if rep.kink_retries else "")
            )
    verdict = "PASS" if worst < tolerance else "FAIL"
    click.echo(f"max relative error {worst:.3e} (tolerance {tolerance:g}): {verdict}")
    if worst >= tolerance:
        raise NumericError(f"gradient check failed: {worst:.3e} >= {tolerance:g}")


@cli.command(epilog=FEATURES_SCHEMA + "\n\n" + PAIRS_SCHEMA)
@click.argument("path", type=click.Path(dir_okay=False), required=False)
@click.option("--shapes", is_flag=True, help="Print the GKR parameter shape table instead of reading a file.")
@click.option("--dim", type=click.IntRange(min=1), default=512, show_default=True, help="D for --shapes.")
@click.option("--layer-dims", default="512,4", show_default=True, help="Layer sizes for --shapes.")
def inspect(path, shapes, dim, layer_dims):
    """Summarize a features CSV, pairs CSV, checkpoint or report, or print parameter shapes."""
    if shapes:
        cfg = gkrnet.GkrConfig(dim=dim, layer_dims=_int_list(layer_dims, "--layer-dims"))
        for name, shape in gkrnet.param_shapes(cfg).items():
            click.echo(f"{name:<16} {' x '.join(str(s) for s in shape)}")
        click.echo(f"{'readout input':<16} {cfg.readout_input_dim}")
        return
    if path is None:
        raise UsageError("give a file to inspect or --shapes")
    if not os.path.exists(path):
        raise UsageError(f"{path}: no such file")
    if path.endswith(".json"):
        _inspect_json(path)
        return
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
    if header.startswith("id,role"):
        table = read_features(path)
        n_parent = table.roles.count("parent")
        click.echo(f"features: {len(table)} rows ({n_parent} parent, {len(table) - n_parent} child), dim {table.dim}")
    elif header.startswith("parent_id"):
        ps = read_pairs(path, allow_missing_folds=True)
        click.echo(f"pairs: {len(ps.positives)} positive, {len(ps.negatives)} negative")
        click.echo(f"folds: {', '.join(map(str, ps.folds)) or 'unassigned'}")
        click.echo(f"relations: {', '.join(ps.relations)}")
    else:
        raise UsageError(f"{path}: not a features or pairs CSV (header {header[:40]!r})")


def _inspect_json(path: str) -> None:
    doc = _load_config(path)
    kind = doc.get("kind")
    if kind == "gkr-pair-model":
        model, params = load_checkpoint(path)
        click.echo(f"checkpoint: {model.kind} on {model.input_dim}-dim features, seed {model.config.seed}")
        for name, v in params.items():
            click.echo(f"  {name:<16} {' x '.join(str(s) for s in v.shape)}")
    elif kind == "crossval":
        click.echo(f"crossval report: mean accuracy {doc['mean_accuracy']:.4f}")
        for f in doc["folds"]:
            click.echo(f"  fold {f['fold']}: {f['accuracy']:.4f} ({f['n_test']} pairs)")
    elif kind == "ablation":
        click.echo(f"ablation over {', '.join(doc['axes'])}")
        for row in doc["rows"]:
            click.echo(f"  {row['label']:<12} {row['mean_accuracy']:.4f}")
    else:
        config, _ = _build_config(path)
        click.echo(json.dumps(config.to_dict(), indent=2))


def run(argv: list[str] | None = None) -> int:
    """Run the CLI and return its exit code instead of calling sys.exit."""
    args = sys.argv[1:] if argv is None else list(argv)
    try:
        rv = cli.main(args=args, prog_name="gkr", standalone_mode=False)
        return rv if isinstance(rv, int) else EXIT_OK
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_INVALID
    except click.ClickException as e:
        e.show()
        return EXIT_INVALID
    except (NumericError, FloatingPointError) as e:
        click.echo(f"numeric failure: {e}", err=True)
        return EXIT_NUMERIC
    except (UsageError, ParseError, PairSetError, ShapeError, DomainError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_INVALID
    except OSError as e:
        click.echo(f"error: {e.filename or ''}: {e.strerror}", err=True)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
