"""Command-line entry point: ``punet <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 I/O failure, 1 anything else the library rejects.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config, parse_override
from .errors import ConfigError, NumericError, PUNetError
from .ptnsr import PTNSRFormatError

log = logging.getLogger("punet")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


class CLIError(PUNetError):
    def __init__(self, message: str, code: int = EXIT_ERROR) -> None:
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# Helpers


def _resolve(args) -> RunConfig:
    overrides = dict(parse_override(s) for s in args.set or [])
    for key in ("seed", "threads"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    return load_config(args.config, overrides)


def _out(args, cfg: RunConfig, key: str) -> Path:
    path = Path(args.out or getattr(cfg, key))
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CLIError(f"cannot create output directory {path}: {e.strerror}", EXIT_IO) from None
    if not os.access(path, os.W_OK):
        raise CLIError(f"output directory {path} is not writable", EXIT_IO)
    return path


def _load_data(path: str | os.PathLike):
    from .synth import load_dataset

    if not (Path(path) / "dataset.json").is_file():
        raise CLIError(f"no dataset at {path} (run `punet synth` first)", EXIT_IO)
    ds, _ = load_dataset(path)
    return ds


def _load_model(path: str | os.PathLike):
    from .model import load_checkpoint

    if not (Path(path) / "manifest.json").is_file():
        raise CLIError(f"no checkpoint at {path}", EXIT_IO)
    return load_checkpoint(path)


def _check_compatible(model, ds, cfg: RunConfig) -> None:
    if tuple(ds.images.shape[1:3]) != tuple(model.config.input_size):
        raise CLIError(
            f"dataset images are {ds.images.shape[1:3]} but checkpoint expects {model.config.input_size}", EXIT_CONFIG
        )
    if ds.n_raters != model.config.n_raters:
        raise CLIError(f"dataset has {ds.n_raters} raters but checkpoint expects {model.config.n_raters}", EXIT_CONFIG)


def _split(ds, cfg: RunConfig):
    if ds.n_scenes < cfg.n_train + 1:
        raise CLIError(f"target dataset has {ds.n_scenes} scenes; need more than n_train={cfg.n_train}", EXIT_CONFIG)
    return ds.split(cfg.n_train)


# --------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    from .pipeline import source_dataset, target_dataset
    from .synth import save_dataset

    cfg = _resolve(args)
    key = "source_dir" if args.domain == "source" else "target_dir"
    out = _out(args, cfg, key)
    ds = source_dataset(cfg) if args.domain == "source" else target_dataset(cfg)
    save_dataset(ds, out, {"config_seed": cfg.seed})
    cfg.write(out)
    means = ds.images.mean()
    print(f"domain={args.domain} scenes={ds.n_scenes} raters={ds.n_raters} samples={len(ds)} mean_intensity={means:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .model import FineTuneMode, PUNet
    from .report import plot_loss
    from .training import TrainingStrategy, train, write_log_csv

    cfg = _resolve(args)
    ds = _load_data(args.data or cfg.source_dir)
    out = _out(args, cfg, "pretrained_dir")
    model = PUNet(cfg.unet(), seed=cfg.seed)
    _check_compatible(model, ds, cfg)
    res = train(
        model, ds, FineTuneMode.FULL, TrainingStrategy.FUSION, cfg.pretrain_schedule(),
        seed=cfg.seed, batch_size=cfg.batch_size, smooth=cfg.dice_smooth,
    )
    model.save(out, {"stage": "pretrain", "seed": cfg.seed, "epoch_loss": res.epoch_loss})
    write_log_csv(res.log, out / "train_log.csv")
    plot_loss({"pretrain": res.epoch_loss}, out / "loss.png")
    cfg.write(out)
    print(f"pretrain: {len(res.epoch_loss)} epochs, final loss {res.epoch_loss[-1]:.4f}; wrote {out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .model import FineTuneMode
    from .report import plot_loss, prompt_ratio
    from .training import resume_training, train, write_log_csv

    cfg = _resolve(args)
    if args.mode:
        cfg = cfg.replace(mode=args.mode)
    if args.strategy:
        cfg = cfg.replace(strategy=args.strategy)
    out = _out(args, cfg, "checkpoint_dir")
    train_set, _ = _split(_load_data(args.data or cfg.target_dir), cfg)

    if args.resume:
        if not (out / "manifest.json").is_file():
            raise CLIError(f"--resume: no checkpoint in {out}", EXIT_IO)
        model, res = resume_training(out, train_set, cfg.finetune_schedule(), batch_size=cfg.batch_size)
    else:
        model, extra = _load_model(args.checkpoint or cfg.pretrained_dir)
        _check_compatible(model, train_set, cfg)
        mode = FineTuneMode(cfg.mode)
        if mode is FineTuneMode.PROMPT_AND_HEAD:
            n, total, ratio = prompt_ratio(model)
            print(f"trainable parameters: {n} / {total} = {100 * ratio:.3f}%")
            if ratio > cfg.max_prompt_ratio:
                raise CLIError(
                    f"prompt-mode trainable ratio {ratio:.4%} exceeds max_prompt_ratio {cfg.max_prompt_ratio:.2%}",
                    EXIT_CONFIG,
                )
        res = train(
            model, train_set, mode, cfg.strategy, cfg.finetune_schedule(), seed=cfg.seed,
            batch_size=cfg.batch_size, smooth=cfg.dice_smooth, checkpoint_dir=out,
        )
    write_log_csv(res.log, out / "train_log.csv")
    plot_loss({"fine-tune": res.epoch_loss}, out / "loss.png")
    cfg.write(out)
    print(f"finetune ({cfg.mode}, {cfg.strategy}): final loss {res.epoch_loss[-1]:.4f}; wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_matrix
    from .model import count_params
    from .report import write_eval_report

    cfg = _resolve(args)
    ckpt = Path(args.checkpoint or cfg.checkpoint_dir)
    model, extra = _load_model(ckpt)
    _, test = _split(_load_data(args.data or cfg.target_dir), cfg)
    _check_compatible(model, test, cfg)
    out = _out(args, cfg, "report_dir")
    matrix = evaluate_matrix(model, test)
    trained = count_params(model.params, trainable_only=True)
    matrix.params = {r: trained for r in matrix.rows}
    losses = {"fine-tune": extra["epoch_loss"]} if extra.get("epoch_loss") else None
    write_eval_report(out, model, matrix, test, args.overlays, losses)
    cfg.write(out)
    print(matrix.to_markdown(), end="")
    print(f"specialization gap: {matrix.specialization_gap(test.n_raters):.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import pipeline as P
    from .report import write_ablation_report

    cfg = _resolve(args)
    out = _out(args, cfg, "report_dir")
    seeds = args.seeds if args.seeds else [cfg.seed]
    exp = P.Experiment(cfg)
    if args.which == "locations":
        report = P.run_ablation_locations(exp, seeds)
        tables = {"mean over seeds": P.locations_table(exp, seeds)}
    elif args.which == "strategy":
        report = P.run_ablation_strategy(exp, seeds)
        tables = {"mean over seeds": P.strategy_table(exp, seeds)}
    else:
        tables = {}
        for s in seeds:
            _, tr, te = exp.data(s)
            tables[f"seed {s}"] = P.baseline_matrix(cfg, tr, te, s)
        table = P.mean_matrix(list(tables.values()))
        (out / "baselines.csv").write_text(table.to_csv())
        (out / "baselines.md").write_text(table.to_markdown())
        cfg.write(out)
        print(table.to_markdown(), end="")
        return EXIT_OK
    write_ablation_report(out, report, tables)
    cfg.write(out)
    print(report.to_csv(), end="")
    print(report.summary())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed or 0)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status:4} {r.name:28} rel_err={r.error:.3e} tol={r.tolerance:.0e}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_run(args) -> int:
    """synth -> pretrain -> finetune -> eval under one root directory."""
    root = Path(args.out)
    base = ["--config", args.config] if args.config else []
    for s in args.set or []:
        base += ["--set", s]
    if args.seed is not None:
        base += ["--seed", str(args.seed)]
    dirs = {k: str(root / k) for k in ("source", "target", "pretrained", "finetuned", "report")}
    steps = [
        ["synth", "--domain", "source", "--out", dirs["source"]],
        ["synth", "--domain", "target", "--out", dirs["target"]],
        ["pretrain", "--data", dirs["source"], "--out", dirs["pretrained"]],
        ["finetune", "--data", dirs["target"], "--checkpoint", dirs["pretrained"], "--out", dirs["finetuned"]],
        ["eval", "--data", dirs["target"], "--checkpoint", dirs["finetuned"], "--out", dirs["report"]],
    ]
    for step in steps:
        code = main(step + base)
        if code != EXIT_OK:
            return code
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (keys are RunConfig fields)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; value parsed as JSON")
    common.add_argument("--seed", type=int, help="global seed (falls back to $PUNET_SEED, then the config)")
    common.add_argument("--threads", type=int, help="worker threads for data generation")
    common.add_argument("--out", help="output directory (defaults to the matching *_dir config key)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="punet", description="Rater-aware prompt tuning on synthetic multi-rater data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-rater dataset")
    s.add_argument("--domain", choices=["source", "target"], default="source")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="full-model training on source majority-vote labels")
    s.add_argument("--data", help="source dataset directory")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="adapt a pretrained checkpoint to the target domain")
    s.add_argument("--data", help="target dataset directory")
    s.add_argument("--checkpoint", help="pretrained checkpoint directory")
    s.add_argument("--mode", choices=["full", "head", "prompt"], help="which parameters are trainable")
    s.add_argument("--strategy", choices=["individual", "fusion", "mix"], help="which label subsets are sampled")
    s.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", parents=[common], help="prompt x label-source matrix, overlays and figures")
    s.add_argument("--data", help="target dataset directory")
    s.add_argument("--checkpoint", help="fine-tuned checkpoint directory")
    s.add_argument("--overlays", type=int, default=2, help="test scenes rendered as overlays")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="insertion-location, training-strategy or baseline study")
    s.add_argument("which", choices=["locations", "strategy", "baselines"])
    s.add_argument("--seeds", type=int, nargs="+", help="seeds to average over (default: the config seed)")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("run", parents=[common], help="synth, pretrain, finetune and eval in one go")
    s.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    if args.command == "run" and not args.out:
        parser.error("run requires --out")
    try:
        return args.func(args)
    except CLIError as e:
        print(f"punet: error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"punet: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"punet: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, PTNSRFormatError, json.JSONDecodeError) as e:
        print(f"punet: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except PUNetError as e:
        print(f"punet: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
