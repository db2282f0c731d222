"""Command-line interface.

Every command accepts ``--config FILE`` (a JSON document with optional
sections ``generator``, ``train``, ``eval``, ``benchmark`` and a top-level
``seed``); explicit flags override values from the file. Each command
writes ``config.json`` holding the fully resolved settings into its output
directory.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional

import click
import numpy as np

from laso import metrics
from laso.binio import FileFormatError
from laso.fewshot import METHODS, BenchmarkConfig, run_benchmark
from laso.labels import to_index_set
from laso.nets import (
    ExprSyntaxError,
    LasoModel,
    classify,
    compose_expression,
    load_checkpoint,
    parse_expression,
    save_checkpoint,
)
from laso.synth import GeneratorSpec, generate_bank, load_bank, save_bank
from laso.training import TrainConfig, TrainingDivergedError, pretrain_classifier, train_laso

logger = logging.getLogger("laso")

EVAL_DEFAULTS = {
    "pairing_seed": 0,
    "unseen_epochs": 50,
    "unseen_lr": 3e-3,
    "ks": [1, 3, 5],
    "metric": "sqeuclidean",
    "variant": 2,
}


class CliError(click.ClickException):
    pass


# ---------------------------------------------------------------- config plumbing


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise CliError(f"malformed config {path}: {e}") from None
    if not isinstance(doc, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return doc


def _merge(base: dict, *layers: dict) -> dict:
    out = dict(base)
    for layer in layers:
        out.update({k: v for k, v in layer.items() if v is not None})
    return out


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise CliError(f"config section {name!r} must be an object")
    return sec


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_config(out: Path, command: str, resolved: dict) -> None:
    doc = {"command": command, **resolved}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o: Any):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _ints(text: Optional[str]) -> Optional[list[int]]:
    if text is None:
        return None
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"expected a comma-separated list of integers, got {text!r}") from None


def _bank(path: str):
    try:
        return load_bank(path)
    except FileNotFoundError:
        raise CliError(f"bank file not found: {path}") from None
    except FileFormatError as e:
        raise CliError(str(e)) from None


def _model(path: str) -> LasoModel:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None
    except FileFormatError as e:
        raise CliError(str(e)) from None


def _check_compatible(bank, model: LasoModel) -> None:
    if model.dim != bank.d or model.n_labels != bank.n_labels:
        raise CliError(f"model (d={model.dim}, L={model.n_labels}) does not match bank (d={bank.d}, L={bank.n_labels})")


def _train_config(doc: dict, seed: Optional[int], flags: dict) -> TrainConfig:
    sec = _section(doc, "train")
    base = TrainConfig().to_dict()
    weights = _merge(base["loss_weights"], sec.get("loss_weights", {}), flags.pop("loss_weights", {}))
    merged = _merge(base, {k: v for k, v in sec.items() if k != "loss_weights"}, {"seed": doc.get("seed")}, flags, {"seed": seed})
    merged["loss_weights"] = weights
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad training config: {e}") from None


def _eval_config(doc: dict, flags: dict) -> dict:
    sec = _section(doc, "eval")
    unknown = set(sec) - set(EVAL_DEFAULTS)
    if unknown:
        raise CliError(f"unknown eval fields: {sorted(unknown)}")
    return _merge(EVAL_DEFAULTS, sec, flags)


# ---------------------------------------------------------------- commands


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Label-set operation networks on feature vectors."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", default="runs/gen", show_default=True)
@click.option("--seed", type=int)
@click.option("--n-train", type=int, help="Training samples (default 2000).")
@click.option("--n-test", type=int)
@click.option("--n-pool", type=int)
@click.option("--d", "d", type=int)
@click.option("--n-labels", type=int)
@click.option("--seen-count", type=int)
@click.option("--prototype-mode", type=click.Choice(["random_nonneg", "disjoint_blocks"]))
@click.option("--clean/--no-clean", default=None, help="Unit amplitudes and zero noise.")
def gen(config_path, out_dir, seed, n_train, n_test, n_pool, **spec_flags) -> None:
    """Generate a synthetic feature bank."""
    doc = _load_config(config_path)
    sec = dict(_section(doc, "generator"))
    counts = _merge({"n_train": 2000, "n_test": None, "n_pool": None}, {k: sec.pop(k, None) for k in ("n_train", "n_test", "n_pool")}, dict(n_train=n_train, n_test=n_test, n_pool=n_pool))
    flags = dict(spec_flags)
    flags["clean_mode"] = flags.pop("clean")
    flags["n_labels"] = flags.pop("n_labels")
    try:
        spec = GeneratorSpec.from_dict(_merge(GeneratorSpec().to_dict(), sec, flags))
    except (TypeError, ValueError) as e:
        raise CliError(f"bad generator config: {e}") from None
    seed = _merge({"seed": 0}, {"seed": doc.get("seed")}, {"seed": seed})["seed"]
    n = counts["n_train"]
    counts["n_test"] = n // 2 if counts["n_test"] is None else counts["n_test"]
    counts["n_pool"] = n // 4 if counts["n_pool"] is None else counts["n_pool"]
    bank = generate_bank(spec, n, seed, counts["n_test"], counts["n_pool"])
    out = _out_dir(out_dir)
    save_bank(bank, out / "bank.lbnk")
    _write_config(out, "gen", {"seed": seed, "generator": {**spec.to_dict(), **counts}})
    click.echo(f"wrote {out / 'bank.lbnk'} (N={bank.n}, d={bank.d}, L={bank.n_labels})")


def _train_options(f):
    for opt in reversed(
        [
            click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False)),
            click.option("--seed", type=int),
            click.option("--epochs", type=int),
            click.option("--pretrain-epochs", type=int),
            click.option("--batch-size", type=int),
            click.option("--lr", type=float),
            click.option("--classifier-lr", type=float),
        ]
    ):
        f = opt(f)
    return f


@main.command("pretrain-classifier")
@click.option("--bank", "bank_path", required=True)
@click.option("--out-dir", default="runs/pretrain", show_default=True)
@_train_options
def pretrain_classifier_cmd(bank_path, out_dir, config_path, seed, **flags) -> None:
    """Train the classifier on the seen labels of the train split.

    Writes a checkpoint holding the classifier and freshly initialized
    operator networks, ready for ``train --init``.
    """
    doc = _load_config(config_path)
    cfg = _train_config(doc, seed, flags)
    bank = _bank(bank_path)
    model = LasoModel.create(bank.d, bank.n_labels, seed=_model_seed(cfg), n_blocks=cfg.n_blocks, dropout=cfg.dropout, slope=cfg.slope, final_relu=cfg.final_relu)
    model.classifier = pretrain_classifier(bank, cfg)
    out = _out_dir(out_dir)
    save_checkpoint(model, out / "classifier.laso")
    _write_config(out, "pretrain-classifier", {"bank": bank_path, "train": cfg.to_dict()})
    report = metrics.classification_eval({}, bank, model.classifier, pairing_seed=0)
    click.echo(f"wrote {out / 'classifier.laso'}; seen mAP on test originals {report.map('original', 'seen'):.4f}")


def _model_seed(cfg: TrainConfig) -> int:
    return int(np.random.SeedSequence(cfg.seed).spawn(3)[0].generate_state(1)[0])


@main.command()
@click.option("--bank", "bank_path", required=True)
@click.option("--init", "init_path", help="Checkpoint from pretrain-classifier; otherwise the classifier is pre-trained first.")
@click.option("--out-dir", default="runs/train", show_default=True)
@_train_options
@click.option("--w-laso", type=float)
@click.option("--w-sym", type=float)
@click.option("--w-mc", type=float)
@click.option("--sym-squared/--no-sym-squared", default=None)
@click.option("--overlap-pairs", type=float, help="Fraction of partners drawn to share a label with the anchor.")
@click.option("--n-blocks", type=click.Choice(["3", "4"]))
@click.option("--verify-decoupling/--no-verify-decoupling", default=None)
def train(bank_path, init_path, out_dir, config_path, seed, w_laso, w_sym, w_mc, n_blocks, **flags) -> None:
    """Train the three operator networks (alternating with the classifier)."""
    doc = _load_config(config_path)
    flags["loss_weights"] = {"laso": w_laso, "sym": w_sym, "mc": w_mc}
    flags["n_blocks"] = None if n_blocks is None else int(n_blocks)
    cfg = _train_config(doc, seed, flags)
    bank = _bank(bank_path)
    model = None
    if init_path:
        model = _model(init_path)
        _check_compatible(bank, model)
    out = _out_dir(out_dir)
    try:
        model, log = train_laso(bank, cfg, model)
    except TrainingDivergedError as e:
        raise CliError(str(e)) from None
    save_checkpoint(model, out / "model.laso")
    (out / "loss_log.csv").write_text(log.to_csv())
    summary = {
        "classifier_steps": log.classifier_steps,
        "operator_steps": log.operator_steps,
        "classifier_changed_by_operator_steps": log.classifier_changed_by_operator_steps,
        "operators_changed_by_classifier_steps": log.operators_changed_by_classifier_steps,
        "checksums": log.checksums,
    }
    metrics.write_json(summary, out / "train_summary.json")
    _write_config(out, "train", {"bank": bank_path, "init": init_path, "train": cfg.to_dict()})
    last = log.epochs[-1] if log.epochs else {}
    click.echo(f"wrote {out / 'model.laso'}; final total loss {last.get('total', float('nan')):.4f} ({log.seconds:.1f}s)")


def _eval_options(f):
    for opt in reversed(
        [
            click.option("--bank", "bank_path", required=True),
            click.option("--model", "model_path", required=True),
            click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False)),
            click.option("--pairing-seed", type=int),
        ]
    ):
        f = opt(f)
    return f


@main.command("eval-class")
@_eval_options
@click.option("--out-dir", default="runs/eval-class", show_default=True)
@click.option("--unseen-epochs", type=int)
@click.option("--method", type=click.Choice(["learned", "analytic"]), default="learned", show_default=True)
@click.option("--variant", type=click.IntRange(1, 2))
def eval_class(bank_path, model_path, config_path, out_dir, method, **flags) -> None:
    """Classification mAP of synthesized vectors (seen and unseen labels)."""
    doc = _load_config(config_path)
    ev = _eval_config(doc, flags)
    bank, model = _bank(bank_path), _model(model_path)
    _check_compatible(bank, model)
    ops = metrics.learned_operators(model) if method == "learned" else metrics.analytic_operators(ev["variant"])
    unseen = metrics.unseen_classifier_train(bank, epochs=ev["unseen_epochs"], lr=ev["unseen_lr"], seed=ev["pairing_seed"])
    report = metrics.classification_eval(ops, bank, model.classifier, unseen, pairing_seed=ev["pairing_seed"])
    out = _out_dir(out_dir)
    (out / "classification.csv").write_text(report.table_csv())
    (out / "classification_per_class.csv").write_text(report.to_csv())
    metrics.write_json(report.to_json(), out / "classification.json")
    _write_config(out, "eval-class", {"bank": bank_path, "model": model_path, "method": method, "eval": ev})
    click.echo(report.table_csv(), nl=False)


@main.command("eval-retrieval")
@_eval_options
@click.option("--out-dir", default="runs/eval-retrieval", show_default=True)
@click.option("--ks", help="Comma-separated k values (default 1,3,5).")
@click.option("--metric", type=click.Choice(["sqeuclidean", "cosine"]))
@click.option("--method", type=click.Choice(["learned", "analytic"]), default="learned", show_default=True)
@click.option("--variant", type=click.IntRange(1, 2))
def eval_retrieval(bank_path, model_path, config_path, out_dir, ks, method, **flags) -> None:
    """Top-k max-IoU retrieval of synthesized vectors among real test samples."""
    doc = _load_config(config_path)
    flags["ks"] = _ints(ks)
    ev = _eval_config(doc, flags)
    bank, model = _bank(bank_path), _model(model_path)
    _check_compatible(bank, model)
    ops = metrics.learned_operators(model) if method == "learned" else metrics.analytic_operators(ev["variant"])
    try:
        report = metrics.retrieval_eval(ops, bank, ev["ks"], pairing_seed=ev["pairing_seed"], metric=ev["metric"])
    except ValueError as e:
        raise CliError(str(e)) from None
    out = _out_dir(out_dir)
    (out / "retrieval.csv").write_text(report.to_csv())
    metrics.write_json(report.to_json(), out / "retrieval.json")
    _write_config(out, "eval-retrieval", {"bank": bank_path, "model": model_path, "method": method, "eval": ev})
    click.echo(report.to_csv(), nl=False)


@main.command()
@_eval_options
@click.option("--out-dir", default="runs/ablate", show_default=True)
@click.option("--unseen-epochs", type=int)
def ablate(bank_path, model_path, config_path, out_dir, **flags) -> None:
    """Learned operators against both analytic variants (classification mAP)."""
    doc = _load_config(config_path)
    ev = _eval_config(doc, flags)
    bank, model = _bank(bank_path), _model(model_path)
    _check_compatible(bank, model)
    unseen = metrics.unseen_classifier_train(bank, epochs=ev["unseen_epochs"], lr=ev["unseen_lr"], seed=ev["pairing_seed"])
    rows = {
        "learned": metrics.learned_operators(model),
        "analytic_v1": metrics.analytic_operators(1),
        "analytic_v2": metrics.analytic_operators(2),
    }
    lines = ["method," + ",".join(f"{op}_{s}" for s in ("seen", "unseen") for op in ("sub", "int", "uni"))]
    result = {}
    for name, ops in rows.items():
        rep = metrics.classification_eval(ops, bank, model.classifier, unseen, pairing_seed=ev["pairing_seed"])
        vals = [rep.map(op, s) for s in ("seen", "unseen") for op in ("sub", "int", "uni")]
        result[name] = rep.to_json()
        lines.append(name + "," + ",".join(f"{v:.6f}" for v in vals))
    out = _out_dir(out_dir)
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    metrics.write_json(result, out / "ablation.json")
    _write_config(out, "ablate", {"bank": bank_path, "model": model_path, "eval": ev})
    click.echo("\n".join(lines))


@main.command()
@click.option("--bank", "bank_path", required=True)
@click.option("--model", "model_path", help="Needed for learned_* methods.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", default="runs/fewshot", show_default=True)
@click.option("--seed", type=int)
@click.option("--methods", help=f"Comma-separated subset of {', '.join(METHODS)}.")
@click.option("--shots", help="Comma-separated shot counts (default 1,5).")
@click.option("--episodes", type=int)
@click.option("--epochs", type=int)
@click.option("--lr", type=float)
@click.option("--batch-size", type=int)
@click.option("--synth-factor", type=int)
@click.option("--n-synth", type=int)
@click.option("--skip-empty/--keep-empty", default=None)
@click.option("--mixup-alpha", type=float)
def fewshot(bank_path, model_path, config_path, out_dir, seed, methods, shots, **flags) -> None:
    """Multi-label few-shot benchmark over the unseen labels."""
    doc = _load_config(config_path)
    flags["methods"] = None if methods is None else [m.strip() for m in methods.split(",") if m.strip()]
    flags["shots"] = _ints(shots)
    sec = _section(doc, "benchmark")
    merged = _merge(BenchmarkConfig().to_dict(), sec, {"seed": doc.get("seed")}, flags, {"seed": seed})
    try:
        cfg = BenchmarkConfig.from_dict(merged)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad benchmark config: {e}") from None
    bank = _bank(bank_path)
    model = None
    if model_path:
        model = _model(model_path)
        _check_compatible(bank, model)
    try:
        result = run_benchmark(bank, model, cfg)
    except ValueError as e:
        raise CliError(str(e)) from None
    out = _out_dir(out_dir)
    (out / "fewshot_episodes.csv").write_text(result.to_csv())
    (out / "fewshot.csv").write_text(result.table_csv())
    metrics.write_json(result.to_json(), out / "fewshot.json")
    _write_config(out, "fewshot", {"bank": bank_path, "model": model_path, "benchmark": cfg.to_dict()})
    click.echo(result.table_csv(), nl=False)


@main.command()
@click.option("--out-dir", help="Also write gradcheck.csv here.")
@click.option("--seed", type=int, default=0, show_default=True)
def gradcheck(out_dir, seed) -> None:
    """Finite-difference check of every primitive and loss; exit 1 on failure."""
    from laso.gradcheck import TOL, run_suite

    report = run_suite(seed=seed)
    if out_dir:
        out = _out_dir(out_dir)
        lines = ["case,seed,rel_error,coords"] + [f"{r.name},{r.seed},{r.rel_error:.3e},{r.n_coords}" for r in report.results]
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
        _write_config(out, "gradcheck", {"seed": seed})
    worst = report.worst()
    click.echo(f"{len(report.results)} checks in {report.seconds:.1f}s; worst {worst.name} (seed {worst.seed}) rel. error {worst.rel_error:.2e}")
    if not report.passed:
        for r in report.failures:
            click.echo(f"FAIL {r.name} seed {r.seed}: {r.rel_error:.2e} >= {TOL}", err=True)
        sys.exit(1)


@main.command()
@click.argument("expression")
@click.option("--bank", "bank_path", required=True)
@click.option("--model", "model_path", help="Needed unless --method analytic.")
@click.option("--bind", multiple=True, help="NAME=INDEX, binding a leaf name to a bank row.")
@click.option("--method", type=click.Choice(["learned", "analytic"]), default="learned", show_default=True)
@click.option("--variant", type=click.IntRange(1, 2), default=2, show_default=True)
@click.option("--k", type=int, default=5, show_default=True)
@click.option("--split", type=click.Choice(["train", "test", "pool"]), default="test", show_default=True)
@click.option("--out-dir", help="Also write compose.json here.")
def compose(expression, bank_path, model_path, bind, method, variant, k, split, out_dir) -> None:
    """Evaluate a set expression such as 'sub(A,int(B,C))' and list its nearest neighbours."""
    try:
        expr = parse_expression(expression, method)
    except ExprSyntaxError as e:
        raise CliError(f"cannot parse expression: {e}") from None
    bindings = {}
    for b in bind:
        name, sep, val = b.partition("=")
        if not sep or not val.strip().isdigit():
            raise CliError(f"--bind expects NAME=INDEX, got {b!r}")
        bindings[name.strip()] = int(val)
    bank = _bank(bank_path)
    model = None
    if model_path:
        model = _model(model_path)
        _check_compatible(bank, model)
    elif method == "learned" and not expr.is_leaf:
        raise CliError("--model is required for learned operations")
    try:
        feature, expected = compose_expression(expr, bank, model, bindings, variant)
    except KeyError as e:
        raise CliError(e.args[0]) from None
    pool = bank.indices(split)
    leaves = {bindings.get(r, int(r) if r.isdigit() else -1) for r in expr.leaves()}
    pool = np.array([i for i in pool if i not in leaves])
    if len(pool) < k:
        raise CliError(f"split {split!r} has only {len(pool)} candidates for k={k}")
    dist = metrics.pairwise_distances(feature[None, :], bank.features64(pool))[0]
    order = np.argsort(dist, kind="stable")[:k]
    from laso.labels import iou

    neighbours = [
        {"index": int(pool[j]), "distance": float(dist[j]), "labels": sorted(to_index_set(bank.labels[pool[j]])), "iou": float(iou(bank.labels[pool[j]], expected))}
        for j in order
    ]
    doc = {"expression": str(expr), "method": method, "expected_labels": sorted(to_index_set(expected)), "neighbours": neighbours}
    if model is not None:
        doc["decoded_labels"] = sorted(int(i) for i in np.flatnonzero(classify(model.classifier, feature) > 0))
    click.echo(f"{expr}: expected labels {doc['expected_labels']}")
    if "decoded_labels" in doc:
        click.echo(f"classifier decodes {doc['decoded_labels']}")
    for n in neighbours:
        click.echo(f"  #{n['index']:<6d} dist {n['distance']:.4f}  iou {n['iou']:.3f}  labels {n['labels']}")
    if out_dir:
        out = _out_dir(out_dir)
        metrics.write_json(doc, out / "compose.json")
        _write_config(out, "compose", {"expression": expression, "bank": bank_path, "model": model_path, "bindings": bindings, "method": method, "variant": variant, "k": k, "split": split})


if __name__ == "__main__":  # pragma: no cover
    main()
