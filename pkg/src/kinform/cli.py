"""Command-line entry point: ``kinform <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure (e.g. a failed gradient check or
diverged training), 2 usage error, 3 unreadable or missing path, 4 invalid
configuration, 5 malformed data.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__
from .autograd.serialize import FormatError
from .data.dataset import DatasetError, KinshipDataset
from .data.io import PairList, export_family_tree, is_dataset_dir, load_family_tree, load_pair_list
from .data.kinship import TRAINED_CLASSES
from .data.synthetic import PROFILES, SyntheticConfig, generate_synthetic
from .evaluation import (
    ABLATION_ORDER,
    ARM_NAMES,
    MAIN_ORDER,
    EvalReport,
    alpha_sweep,
    evaluate,
    make_folds,
    render_table,
    reports_to_csv,
    reports_to_json,
    run_ablation,
    write_reports,
)
from .sampling import balance_stats, build_epoch_plan, format_stats_table, stats_csv_rows
from .seeding import derive_seed
from .training.checkpoint import load_checkpoint
from .training.config import ConfigError, TrainConfig, load_config
from .training.trainer import TrainingDiverged, model_from_checkpoint, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_PATH, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3, 4, 5

log = logging.getLogger("kinform")


class PathError(OSError):
    """An input path is missing or unreadable."""


# -- manifest -----------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    argv: list
    seed: Optional[int]
    config: Optional[dict]
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: list = field(default_factory=list)
    started: str = ""
    finished: str = ""
    status: str = "running"

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def digest_path(path) -> str:
    """sha256 of a file, or of every file under a directory (sorted relative paths)."""
    p = Path(path)
    h = hashlib.sha256()
    files = [p] if p.is_file() else sorted(q for q in p.rglob("*") if q.is_file())
    for f in files:
        h.update(str(f.relative_to(p) if f != p else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# -- helpers ------------------------------------------------------------------


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise PathError(f"no such file or directory: {p}")
    return p


def _load_source(path):
    p = _need(path)
    if p.is_dir() or p.name.endswith(".tsv"):
        if not is_dataset_dir(p):
            raise PathError(f"{p} has no families.tsv")
        return load_family_tree(p)
    return load_pair_list(p)


def _overrides(args) -> dict:
    out = {"seed": args.seed, "protocol": args.protocol, "sampler": args.sampler}
    for key in ("epochs", "alpha", "lr", "batch_size", "fusion", "weighting"):
        out[key] = getattr(args, key, None)
    return out


def _config(args) -> TrainConfig:
    if args.config is not None:
        _need(args.config)
    return load_config(args.config, _overrides(args))


def _out(args) -> Path:
    return Path(args.out)


def _start(args, cfg: Optional[TrainConfig], inputs) -> RunManifest:
    man = RunManifest(args.command, list(args.argv), cfg.seed if cfg else args.seed, cfg.to_dict() if cfg else None,
                      {str(p): digest_path(p) for p in inputs if p is not None}, started=_now())
    man.write(_out(args))
    return man


def _finish(args, man: RunManifest, outputs) -> None:
    man.outputs = [str(p) for p in outputs]
    man.finished = _now()
    man.status = "ok"
    man.write(_out(args))


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    seed = 0 if args.seed is None else args.seed
    sc = SyntheticConfig(n_families=args.families, imbalance_profile=args.profile, latent_dim=args.latent_dim,
                         trait_dim=args.trait_dim)
    man = _start(args, None, [])
    man.config = sc.to_dict()
    man.seed = seed
    ds = generate_synthetic(sc, seed)
    tree = export_family_tree(ds, _out(args))
    print(f"wrote {len(ds.families)} families, {len(ds.members)} members, {ds.n_images} images to {tree.parent}")
    _finish(args, man, [tree])
    return EXIT_OK


def stats_sections(ds: KinshipDataset, seed: int, k: int = 5) -> dict:
    """Raw versus adaptively drawn balance, one row per fold."""
    split = make_folds(ds, k, seed)
    raw, drawn = [], []
    for f in range(split.k):
        train_ds, _ = split.split(ds, f)
        raw.append(balance_stats(train_ds, "pairs", TRAINED_CLASSES, label=str(f + 1)))
        plan = None
        for kin in TRAINED_CLASSES:
            if not any(train_ds.pair_counts(kin).values()):
                continue
            p = build_epoch_plan(train_ds, kin, seed=derive_seed(seed, "stats", f))
            plan = p if plan is None else plan.merge(p)
        drawn.append(balance_stats(plan, label=str(f + 1)))
    return {"raw": raw, "adaptive": drawn}


def cmd_stats(args) -> int:
    path = _need(args.data)
    ds = load_family_tree(path)
    seed = 0 if args.seed is None else args.seed
    sections = stats_sections(ds, seed, args.folds)
    text = format_stats_table(sections) + "\n"
    sys.stdout.write(text)
    if args.out is not None:
        man = _start(args, None, [path])
        man.seed = seed
        out = _out(args)
        (out / "stats.txt").write_text(text, encoding="utf-8")
        import csv

        with open(out / "stats.csv", "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(stats_csv_rows(sections))
        _finish(args, man, [out / "stats.txt", out / "stats.csv"])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    src = _load_source(args.data)
    man = _start(args, cfg, [Path(args.data), args.config and Path(args.config), args.resume and Path(args.resume)])
    resume = load_checkpoint(_need(args.resume)) if args.resume else None
    if args.fold is not None:
        if not isinstance(src, KinshipDataset):
            raise ConfigError("--fold needs a family-tree dataset")
        src, _ = make_folds(src, args.k, cfg.seed).split(src, args.fold)
    out = _out(args)
    ck_path, metrics_path = out / "checkpoint.kchk", out / "metrics.csv"
    result = train(src, cfg, resume=resume, metrics_path=metrics_path, checkpoint_path=ck_path)
    for row in result.metrics:
        print(f"epoch {row['epoch']:3d}  lr {row['lr']:.1e}  loss {row['total']:.6f}")
    _finish(args, man, [ck_path, metrics_path])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ck = load_checkpoint(_need(args.checkpoint))
    model = model_from_checkpoint(ck)
    src = _load_source(args.data)
    cfg = model.config
    man = _start(args, cfg, [Path(args.checkpoint), Path(args.data)])
    if isinstance(src, PairList):
        pairs, images = list(src), src.images
    else:
        if args.fold is not None:
            split = make_folds(src, args.k, cfg.seed)
            pairs, images = split.test_pairs(src, args.fold, cfg.kin_classes), src.images
        else:
            from .data.dataset import balanced_pairs

            pairs, images = balanced_pairs(src, cfg.kin_classes, derive_seed(cfg.seed, "eval")), src.images
    report = evaluate(model, pairs, images, args.threshold, fold=args.fold)
    sys.stdout.write(render_table([report]))
    paths = write_reports([report], _out(args), "report")
    _finish(args, man, paths)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds = load_family_tree(_need(args.data))
    man = _start(args, cfg, [Path(args.data)])
    arms = args.arms.split(",") if args.arms else None
    folds = [int(f) for f in args.folds.split(",")] if args.folds else None
    res = run_ablation(ds, cfg, arms=arms, k=args.k, folds=folds)
    reports = res.test_reports()
    sys.stdout.write(render_table(reports, ABLATION_ORDER, 2, "Average"))
    for name, test, tr in res.rows:
        print(f"# {name}: train {tr.average:.2f} test {test.average:.2f} gap {res.gap(name):.2f}")
    paths = write_reports(reports, _out(args), "ablation", ABLATION_ORDER, 2, folds_digest=res.split_digest,
                          train_averages={n: tr.average for n, _, tr in res.rows})
    _finish(args, man, paths)
    return EXIT_OK


def cmd_alpha_sweep(args) -> int:
    cfg = _config(args)
    ds = load_family_tree(_need(args.data))
    man = _start(args, cfg, [Path(args.data)])
    values = [float(v) for v in args.alphas.split(",")]
    folds = [int(f) for f in args.folds.split(",")] if args.folds else None
    sweep = alpha_sweep(ds, values, cfg, k=args.k, folds=folds)
    text = sweep.render()
    sys.stdout.write(text)
    out = _out(args)
    (out / "alpha_sweep.txt").write_text(text, encoding="utf-8")
    _finish(args, man, [out / "alpha_sweep.txt"])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import check_layers, check_model

    cfg = _config(args)
    if args.out is not None:
        man = _start(args, cfg, [args.config and Path(args.config)])
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    layers = check_layers(seeds, args.eps, args.tol)
    model = check_model(seeds, args.eps, args.tol, config=cfg)
    text = ("[layers]\n" + layers.as_report().format_table() + "\n\n[tiny model]\n"
            + model.as_report().format_table() + "\n")
    ok = layers.passed and model.passed
    text += (f"\nmax relative error: layers {layers.max_error:.3e}, model {model.max_error:.3e} "
             f"(tol {args.tol:g}, eps {args.eps:g}, {args.seeds} seeds, kinks {model.kink_fraction:.2%})\n")
    text += "PASS\n" if ok else "FAIL\n"
    sys.stdout.write(text)
    if args.out is not None:
        (_out(args) / "gradcheck.txt").write_text(text, encoding="utf-8")
        _finish(args, man, [_out(args) / "gradcheck.txt"])
    return EXIT_OK if ok else EXIT_FAIL


def cmd_export_report(args) -> int:
    reports = []
    for path in args.reports:
        data = json.loads(_need(path).read_text(encoding="utf-8"))
        items = data["reports"] if isinstance(data, dict) and "reports" in data else [data]
        reports.extend(EvalReport.from_dict(d) for d in items)
    order = ABLATION_ORDER if args.layout == "ablation" else MAIN_ORDER
    decimals = args.decimals if args.decimals is not None else (2 if args.layout == "ablation" else 1)
    if args.format == "row":
        text = "\n".join(r.row(order, decimals) for r in reports) + "\n"
    elif args.format == "csv":
        text = reports_to_csv(reports, order)
    elif args.format == "json":
        text = reports_to_json(reports)
    else:
        text = render_table(reports, order, decimals, "Average" if args.layout == "ablation" else "Avg.")
    sys.stdout.write(text)
    if args.out is not None:
        man = _start(args, None, [Path(p) for p in args.reports])
        ext = {"row": "txt", "table": "txt"}.get(args.format, args.format)
        path = _out(args) / f"report.{ext}"
        path.write_text(text, encoding="utf-8")
        _finish(args, man, [path])
    return EXIT_OK


# -- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(need_out: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--config", metavar="PATH", help="key = value config file; flags override its values")
    g.add_argument("--seed", type=int, metavar="U64", help="run seed; every module seed is derived from it")
    g.add_argument("--protocol", choices=("restricted", "unrestricted"), help="evaluation protocol")
    g.add_argument("--sampler", choices=("adaptive", "uniform"), help="positive-pair sampler")
    g.add_argument("--out", "-o", metavar="DIR", required=need_out, default=None,
                   help="output directory (manifest and artifacts)")
    return p


def _training_flags(p) -> None:
    g = p.add_argument_group("training overrides")
    g.add_argument("--epochs", type=int, help="number of epochs")
    g.add_argument("--alpha", type=float, help="weight of the verification losses (squared in the objective)")
    g.add_argument("--lr", type=float, help="initial learning rate")
    g.add_argument("--batch-size", type=int, dest="batch_size", help="samples per optimizer step")
    g.add_argument("--fusion", choices=("conv", "concat", "embedding"), help="pair scoring variant")
    g.add_argument("--weighting", choices=("auto", "tied", "untied", "none"), help="side weighting of the embeddings")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kinform", description="Multi-task kinship verification: data, training, evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", parents=[_common(True)], help="generate a synthetic family-tree dataset")
    p.add_argument("--families", type=int, default=120, help="number of families (default 120)")
    p.add_argument("--profile", choices=PROFILES, default="uniform", help="image-count imbalance profile")
    p.add_argument("--latent-dim", type=int, default=16, dest="latent_dim", help="inherited feature dimensions")
    p.add_argument("--trait-dim", type=int, default=0, dest="trait_dim",
                   help="identity-specific, non-inherited feature dimensions")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("stats", parents=[_common(False)], help="per-fold family/member balance, raw vs adaptive")
    p.add_argument("data", help="dataset directory or families.tsv")
    p.add_argument("--folds", type=int, default=5, help="number of folds (default 5)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", parents=[_common(True)], help="train a model and write checkpoint + metrics")
    p.add_argument("data", help="dataset directory, families.tsv, or a pair-list CSV (restricted)")
    p.add_argument("--fold", type=int, help="hold out this fold and train on the rest")
    p.add_argument("--k", type=int, default=5, help="number of folds for --fold (default 5)")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[_common(True)], help="per-class accuracy of a checkpoint")
    p.add_argument("checkpoint", help="checkpoint written by train")
    p.add_argument("data", help="dataset directory or pair-list CSV")
    p.add_argument("--fold", type=int, help="evaluate on this fold's test pairs")
    p.add_argument("--k", type=int, default=5, help="number of folds for --fold (default 5)")
    p.add_argument("--threshold", type=float, default=0.5, help="decision threshold on head scores (default 0.5)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[_common(True)], help="train every ablation arm on shared folds")
    p.add_argument("data", help="dataset directory")
    p.add_argument("--arms", help=f"comma-separated subset of: {', '.join(ARM_NAMES)}")
    p.add_argument("--folds", help="comma-separated fold ids to run (default all)")
    p.add_argument("--k", type=int, default=5, help="number of folds (default 5)")
    _training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("alpha-sweep", parents=[_common(True)], help="accuracy versus the loss weight alpha")
    p.add_argument("data", help="dataset directory")
    p.add_argument("--alphas", default="0.5,1,2", help="comma-separated alpha values (default 0.5,1,2)")
    p.add_argument("--folds", help="comma-separated fold ids to run (default all)")
    p.add_argument("--k", type=int, default=5, help="number of folds (default 5)")
    _training_flags(p)
    p.set_defaults(func=cmd_alpha_sweep)

    p = sub.add_parser("gradcheck", parents=[_common(False)], help="finite-difference check of all layers and the tiny model")
    p.add_argument("--seeds", type=int, default=100, help="number of random seeds (default 100)")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step (default 1e-5)")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error (default 1e-4)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-report", parents=[_common(False)], help="re-render stored report JSON")
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.add_argument("--layout", choices=("main", "ablation"), default="main", help="column order (default main)")
    p.add_argument("--format", choices=("table", "row", "csv", "json"), default="table", help="output format")
    p.add_argument("--decimals", type=int, help="digits after the point (default 1 main, 2 ablation)")
    p.set_defaults(func=cmd_export_report)
    return parser


def main(argv: Optional[list] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (PathError, FileNotFoundError, IsADirectoryError, PermissionError) as err:
        print(f"kinform: error: {err}", file=sys.stderr)
        return EXIT_PATH
    except ConfigError as err:
        print(f"kinform: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FormatError) as err:
        print(f"kinform: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as err:
        print(f"kinform: {err}", file=sys.stderr)
        if err.checkpoint is not None and args.out:
            path = err.checkpoint.save(Path(args.out) / "last_good.kchk")
            print(f"kinform: last good checkpoint written to {path}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
