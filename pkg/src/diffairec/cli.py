"""Command-line entry point.

    diffairec <command> --config PATH [--seed N] [--k N] [--out DIR] [key=value ...]

Commands: ingest, train, predict, eval, ablate, sweep, sparsity, gradcheck.
All artifacts of one run live under ``--out`` (default: the config's ``out``):

    dataset/    canonical dump (ingest)
    train/      checkpoint.ckpt, loss.txt, schedule.txt, group_a.txt, group_b.txt
    predict/    predictions.bin
    eval/       metrics.json, metrics.txt
    ablate/, sweep/, sparsity/   per-run metrics plus a collated table

Each stage directory gets a manifest.json written when the stage starts and
again when it finishes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import experiments as X
from . import io
from .config import ConfigError, RunConfig, load_config
from .data import GroupError, ParseError
from .diffusion import PredictionError, TrainingDiverged
from .gradcheck import format_rows, run_all
from .metrics import MetricsReport, format_table
from .model import VARIANTS

log = logging.getLogger("diffairec")

EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


class CommandError(RuntimeError):
    pass


def _paths(cfg: RunConfig) -> dict[str, Path]:
    root = Path(cfg.out)
    return {name: root / name for name in ("dataset", "train", "predict", "eval", "ablate", "sweep", "sparsity")}


def _manifest(directory: Path, stage: str, status: str, cfg: RunConfig, inputs: dict, artifacts=(), extra=None):
    io.write_manifest(directory / "manifest.json", stage, status, cfg.hash(), cfg.seed, inputs, artifacts, extra)


def _load_dataset(cfg: RunConfig) -> X.Prepared:
    d = _paths(cfg)["dataset"]
    try:
        dump = io.read_dataset(d)
    except FileNotFoundError as exc:
        raise CommandError(str(exc)) from None
    return X.Prepared(dump.matrix, dump.split, dump.groups, dump.fingerprint, dump.kind)


def _check_fingerprint(what: str, expected: str, found: str) -> None:
    if expected != found:
        raise io.FingerprintMismatch(what, expected, found)


# ----------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig, args) -> int:
    d = _paths(cfg)["dataset"]
    inputs = {p: io.sha256_file(p) for p in (cfg.ratings_path, cfg.users_path, cfg.tags_path) if p}
    _manifest(d, "ingest", "started", cfg, inputs)
    prep = X.prepare(cfg)
    fp = io.write_dataset(d, prep.matrix, prep.split, prep.groups, prep.kind)
    m, n = prep.matrix.shape
    _manifest(d, "ingest", "completed", cfg, inputs, [d / f for f in io.DUMP_FILES],
              {"dataset_fingerprint": fp, "n_users": n, "n_items": m,
               "n_ratings": int(prep.matrix.M.sum()),
               "group_sizes": [int(len(prep.groups.group_a)), int(len(prep.groups.group_b))]})
    print(f"ingested {n} users x {m} items, {int(prep.matrix.M.sum())} ratings -> {d}")
    print(f"dataset fingerprint {fp}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    prep = _load_dataset(cfg)
    d = _paths(cfg)["train"]
    ckpt = d / "checkpoint.ckpt"
    inputs = {"dataset": prep.fingerprint}
    _manifest(d, "train", "started", cfg, inputs)
    if cfg.model == "mf":
        params, hist = X.fit_mf(cfg, prep)
        X.save_mf(ckpt, params, hist, prep.fingerprint)
        io.write_loss_history(d / "loss.txt", hist)
        _manifest(d, "train", "completed", cfg, inputs, [ckpt, d / "loss.txt"], {"model": "mf"})
        print(f"trained MF for {len(hist)} epochs, final objective {hist[-1]:.6g} -> {ckpt}")
        return 0

    if args.resume and ckpt.exists():
        fitted, header = X.load_diffairec(ckpt)
        _check_fingerprint("checkpoint/dataset", header["dataset"], prep.fingerprint)
        print(f"resuming from epoch {fitted.state.epoch}")
    else:
        fitted = X.init_diffairec(cfg, prep)

    def on_epoch(state):
        # checkpoint after every epoch so a later divergence keeps the last good state
        X.save_diffairec(ckpt, fitted, cfg, prep.fingerprint)
        io.write_loss_history(d / "loss.txt", state.loss_history)

    try:
        X.fit_diffairec(cfg, prep, resume=fitted, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        _manifest(d, "train", "diverged", cfg, inputs, [ckpt], {"error": str(exc)})
        print(f"training aborted: {exc}", file=sys.stderr)
        if ckpt.exists():
            print(f"last good checkpoint kept at {ckpt}", file=sys.stderr)
        return EXIT_DIVERGED
    X.save_diffairec(ckpt, fitted, cfg, prep.fingerprint)
    io.write_loss_history(d / "loss.txt", fitted.loss_history)
    io.atomic_write(d / "schedule.txt", X.schedule(cfg).to_text())
    ta, tb = fitted.vectors.to_text()
    io.atomic_write(d / "group_a.txt", ta)
    io.atomic_write(d / "group_b.txt", tb)
    arts = [d / f for f in ("checkpoint.ckpt", "loss.txt", "schedule.txt", "group_a.txt", "group_b.txt")]
    _manifest(d, "train", "completed", cfg, inputs, arts, {"model": "diffairec", "epochs": fitted.state.epoch})
    hist = fitted.loss_history
    if hist:
        print(f"trained {cfg.variant} for {len(hist)} epochs, loss {hist[0]:.6g} -> {hist[-1]:.6g} -> {ckpt}")
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    prep = _load_dataset(cfg)
    paths = _paths(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else paths["train"] / "checkpoint.ckpt"
    if not ckpt.exists():
        raise CommandError(f"checkpoint {ckpt} not found; run train first")
    header, _ = io.read_checkpoint(ckpt)
    _check_fingerprint("checkpoint/dataset", header["dataset"], prep.fingerprint)
    d = paths["predict"]
    out = d / "predictions.bin"
    inputs = {"dataset": prep.fingerprint, "checkpoint": io.sha256_file(ckpt)}
    _manifest(d, "predict", "started", cfg, inputs)
    if header["schema"] == "mf":
        params, _, _ = X.load_mf(ckpt)
        pred = X.predict_mf(params)
    else:
        fitted, _ = X.load_diffairec(ckpt)
        pred = X.predict_diffairec(cfg, prep, fitted)
    io.write_predictions(out, pred, prep.matrix.scale)
    _manifest(d, "predict", "completed", cfg, inputs, [out], {"dataset_fingerprint": prep.fingerprint})
    print(f"wrote {pred.shape[0]} x {pred.shape[1]} predictions -> {out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    prep = _load_dataset(cfg)
    paths = _paths(cfg)
    pred_path = Path(args.predictions) if args.predictions else paths["predict"] / "predictions.bin"
    if not pred_path.exists():
        raise CommandError(f"prediction file {pred_path} not found; run predict first")
    man = pred_path.parent / "manifest.json"
    if man.exists():
        recorded = io.read_manifest(man).get("dataset_fingerprint")
        if recorded:
            _check_fingerprint("predictions/dataset", recorded, prep.fingerprint)
    if not prep.split.test.any():
        raise CommandError("dataset has no test split")
    pred, _ = io.read_predictions(pred_path)
    if pred.shape != prep.matrix.shape:
        raise CommandError(f"predictions are {pred.shape[0]}x{pred.shape[1]}, dataset is "
                           f"{prep.matrix.shape[0]}x{prep.matrix.shape[1]}")
    d = paths["eval"]
    inputs = {"dataset": prep.fingerprint, "predictions": io.sha256_file(pred_path)}
    _manifest(d, "eval", "started", cfg, inputs)
    report = X.score(cfg, prep, pred, metadata={"predictions_sha256": inputs["predictions"]})
    io.atomic_write(d / "metrics.json", report.to_json())
    io.atomic_write(d / "metrics.txt", report.to_table())
    _manifest(d, "eval", "completed", cfg, inputs, [d / "metrics.json", d / "metrics.txt"])
    print(report.to_table(), end="")
    return 0


COMPARE_KEYS = ("recall", "ndcg", "A_at_k", "A_at_k_normalized", "E_at_k", "dist_gap")


def comparison_table(rows: list[tuple[str, MetricsReport | None]], label: str, title: str | None = None) -> str:
    k = next((r.k for _, r in rows if r is not None), 0)
    head = (label, f"recall@{k}", f"ndcg@{k}", f"A@{k}", f"A@{k} (norm)", f"E@{k}", "dist_gap")
    body = [head]
    for name, r in rows:
        if r is None:
            body.append((name, *(["diverged"] + [""] * 5)))
        else:
            body.append((name, *(f"{getattr(r, key):.6f}" for key in COMPARE_KEYS)))
    return format_table(body, title)


def _save_report(path: Path, report: MetricsReport | None, status: str = "ok") -> None:
    doc = {"status": status, "report": report.to_dict() if report is not None else None}
    io.atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_report(path: Path) -> tuple[str, MetricsReport | None]:
    doc = json.loads(path.read_text())
    return doc["status"], (MetricsReport.from_dict(doc["report"]) if doc["report"] else None)


def _write_collated(d: Path, rows, label: str, title: str) -> None:
    io.atomic_write(d / "table.txt", comparison_table(rows, label, title))
    io.atomic_write(d / "table.json", json.dumps(
        [{label: name, **({key: getattr(r, key) for key in COMPARE_KEYS} if r else {"status": "diverged"})}
         for name, r in rows], indent=2, sort_keys=True) + "\n")


def cmd_ablate(cfg: RunConfig, args) -> int:
    prep = _load_dataset(cfg)
    d = _paths(cfg)["ablate"]
    inputs = {"dataset": prep.fingerprint}
    _manifest(d, "ablate", "started", cfg, inputs)
    rows = []
    for variant in VARIANTS:
        report, pred = X.run_once(cfg, prep, model="diffairec", variant=variant)
        io.write_predictions(d / f"{variant}.predictions.bin", pred, prep.matrix.scale)
        _save_report(d / f"{variant}.json", report)
        rows.append((variant, report))
    _write_collated(d, rows, "variant", f"ablation, attribute {prep.groups.attribute}, seed {cfg.seed}")
    _manifest(d, "ablate", "completed", cfg, inputs, [d / "table.txt", d / "table.json"])
    print((d / "table.txt").read_text(), end="")
    return 0


def _value_label(param: str, v: float) -> str:
    return f"{param}={int(v)}" if param == "T" else f"{param}={v!r}"


def cmd_sweep(cfg: RunConfig, args) -> int:
    prep = _load_dataset(cfg)
    param = args.param or cfg.sweep_param
    values = [float(v) for v in args.values.split(",")] if args.values else list(cfg.sweep_values)
    if not values:
        raise CommandError("no sweep values given (use --values or sweep_values=...)")
    d = _paths(cfg)["sweep"]
    inputs = {"dataset": prep.fingerprint}
    _manifest(d, "sweep", "started", cfg, inputs, extra={"param": param, "values": values})
    rows = []
    for v in values:
        label = _value_label(param, v)
        path = d / f"{label}.json"
        run_cfg = cfg.replace(**{param: int(v) if param == "T" else v,
                                 "t_start": min(cfg.t_start, int(v)) if param == "T" else cfg.t_start})
        if path.exists():
            status, report = _load_report(path)
            print(f"{label}: already done ({status}), skipping")
        else:
            try:
                report, _ = X.run_once(run_cfg, prep, model="diffairec")
                status = "ok"
            except (TrainingDiverged, PredictionError) as exc:
                report, status = None, "diverged"
                print(f"{label}: run aborted on non-finite values: {exc}", file=sys.stderr)
            _save_report(path, report, status)
        rows.append((label, report))
    _write_collated(d, rows, param, f"sweep over {param}, seed {cfg.seed}")
    _manifest(d, "sweep", "completed", cfg, inputs, [d / "table.txt", d / "table.json"])
    print((d / "table.txt").read_text(), end="")
    return 0


def cmd_sparsity(cfg: RunConfig, args) -> int:
    prep = _load_dataset(cfg)
    ratios = [float(r) for r in args.ratios.split(",")] if args.ratios else list(cfg.sample_ratios)
    d = _paths(cfg)["sparsity"]
    inputs = {"dataset": prep.fingerprint}
    _manifest(d, "sparsity", "started", cfg, inputs, extra={"ratios": ratios})
    rows = []
    for label, ratio in [("base", 0.0)] + [(f"ratio={r!r}", r) for r in ratios]:
        path = d / f"{label}.json"
        if path.exists():
            _, report = _load_report(path)
        else:
            sub = X.undersample_minority(prep, ratio, cfg.seed)
            report, _ = X.run_once(cfg, sub)
            report.metadata["sample_ratio"] = ratio
            _save_report(path, report)
        rows.append((label, report))
    _write_collated(d, rows, "sample", f"minority under-sampling, attribute {prep.groups.attribute}, seed {cfg.seed}")
    _manifest(d, "sparsity", "completed", cfg, inputs, [d / "table.txt", d / "table.json"])
    print((d / "table.txt").read_text(), end="")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    rows = run_all(cfg.seed)
    print(format_rows(rows), end="")
    bad = [r for r in rows if not r.ok]
    print(f"{len(rows) - len(bad)}/{len(rows)} blocks within tolerance")
    return EXIT_FAIL if bad else 0


COMMANDS = {
    "ingest": cmd_ingest, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
    "ablate": cmd_ablate, "sweep": cmd_sweep, "sparsity": cmd_sparsity, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffairec", description="Counterfactual-conditioned diffusion recommender.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--out", help="run directory")
    p.add_argument("--resume", action="store_true", help="train: continue from the existing checkpoint")
    p.add_argument("--checkpoint", help="predict: checkpoint path (default <out>/train/checkpoint.ckpt)")
    p.add_argument("--predictions", help="eval: prediction file (default <out>/predict/predictions.bin)")
    p.add_argument("--param", choices=("T", "L"), help="sweep: parameter to vary")
    p.add_argument("--values", help="sweep: comma-separated values")
    p.add_argument("--ratios", help="sparsity: comma-separated minority sample ratios")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, k=args.k, out=args.out)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](cfg, args)
    except io.FingerprintMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"  expected: {exc.expected}\n  found:    {exc.found}", file=sys.stderr)
        return EXIT_FAIL
    except (CommandError, ParseError, GroupError, io.FormatError, FileNotFoundError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
