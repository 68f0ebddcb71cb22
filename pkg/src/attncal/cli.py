"""Command-line entry point: ``attncal <subcommand> --out DIR [options]``.

Every subcommand resolves a :class:`RunConfig` (defaults, then ``--config``,
then flags), writes the resolved config next to its outputs, and writes
nothing outside ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

from . import experiments as X
from . import model as M
from .config import ConfigError, RunConfig
from .rng import derive_seed
from .tasks import evaluate, gen_set, read_jsonl
from .train import TrainingDiverged, grad_check, train
from .waves import decay_csv, initial_decay, sink_csv, sink_profile

log = logging.getLogger("attncal")

GRAD_CHECK_BOUND = 1e-4


class UsageError(Exception):
    pass


# argument parsing ------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (instances, model init)")
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--jobs", type=int, help="worker threads for evaluation")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")
    common.add_argument("-v", "--verbose", action="store_true")

    model_io = argparse.ArgumentParser(add_help=False)
    model_io.add_argument("--checkpoint", help="checkpoint directory")
    model_io.add_argument("--instances", help="instance set (JSON lines); generated from the config if omitted")

    siw = argparse.ArgumentParser(add_help=False)
    siw.add_argument("--sigma", type=float)
    siw.add_argument("--alpha-dense", type=float)
    siw.add_argument("--alpha-sparse", type=float)
    siw.add_argument("--layers", type=int, nargs=2, metavar=("START", "STOP"), help="SIW layer range")
    siw.add_argument("--renorm", choices=("none", "renormalize", "redistribute_to_dense"))

    p = argparse.ArgumentParser(prog="attncal", description="Attention calibration experiments on a toy transformer.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen", parents=[common], help="emit an instance set")
    g.add_argument("--kind", choices=("kv", "mdqa"))
    g.add_argument("--num-segments", type=int)
    g.add_argument("--per-position", type=int)

    t = sub.add_parser("train", parents=[common], help="train a checkpoint")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)

    sub.add_parser("analyze", parents=[common, model_io], help="wave, flow, sink and decay reports")
    sub.add_parser("probe", parents=[common, model_io], help="initial-saliency probe (Origin/D-IT/I-IT/DI-IT)")
    sub.add_parser("sweep", parents=[common, model_io, siw], help="baseline vs. SIW accuracy")
    a = sub.add_parser("ablate-layers", parents=[common, model_io, siw], help="SIW accuracy per layer range")
    a.add_argument("--range", type=int, nargs=2, action="append", metavar=("START", "STOP"), dest="ranges")
    sub.add_parser("combined", parents=[common, model_io, siw], help="SIW combined with position methods")
    gc = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    gc.add_argument("--checkpoint")
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--samples", type=int, default=None, help="coordinates to check (default: all)")
    return p


def _resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("jobs", f"must be >= 1, got {args.jobs}")
        cfg.jobs = args.jobs
    for key in ("checkpoint", "instances"):
        if getattr(args, key, None) is not None:
            setattr(cfg, key, getattr(args, key))
    try:
        if args.command == "gen":
            task = {k: v for k, v in (("kind", args.kind), ("num_segments", args.num_segments)) if v is not None}
            if task:
                cfg.task = dataclasses.replace(cfg.task, **task)
            if args.per_position is not None:
                cfg.eval = dataclasses.replace(cfg.eval, per_position=args.per_position)
        if args.command == "train":
            tr = {k: v for k, v in (("steps", args.steps), ("lr", args.lr), ("batch", args.batch)) if v is not None}
            if tr:
                cfg.train = dataclasses.replace(cfg.train, **tr)
        if hasattr(args, "alpha_dense"):
            siw = {
                k: v
                for k, v in (
                    ("sigma", args.sigma),
                    ("alpha_dense", args.alpha_dense),
                    ("alpha_sparse", args.alpha_sparse),
                    ("layer_range", tuple(args.layers) if args.layers else None),
                    ("renorm_mode", args.renorm),
                )
                if v is not None
            }
            if siw:
                cfg.siw = dataclasses.replace(cfg.siw, **siw)
                cfg.sweep = [dataclasses.replace(c, **siw) for c in cfg.sweep]
    except ValueError as exc:
        raise ConfigError(_section(args.command), str(exc)) from None
    if getattr(args, "ranges", None):
        cfg.ablation_ranges = [tuple(r) for r in args.ranges]
    cfg.check()
    return cfg


def _section(command: str) -> str:
    return {"gen": "task", "train": "train"}.get(command, "siw")


# shared helpers --------------------------------------------------------------


def _instances(cfg: RunConfig):
    if cfg.instances:
        return read_jsonl(cfg.instances)
    return gen_set(cfg.task, cfg.positions(), cfg.eval.per_position, cfg.seed)


def _model(cfg: RunConfig) -> M.Model:
    if not cfg.checkpoint:
        raise UsageError("this subcommand needs --checkpoint (or 'checkpoint' in the config)")
    return M.Model.load(cfg.checkpoint)


def _report(fmt: str, name: str, csv_text: str, records) -> dict[str, str]:
    if fmt == "json":
        return {f"{name}.json": json.dumps(records, indent=2, sort_keys=True) + "\n"}
    return {f"{name}.csv": csv_text}


def _baseline_files(fmt: str, base: X.BaselinePass) -> dict[str, str]:
    return {
        **_report(fmt, "wave", base.wave.to_csv(), base.wave.to_records()),
        **_report(fmt, "flow", base.flow.to_csv(), base.flow.to_records()),
    }


# subcommands -----------------------------------------------------------------


def cmd_gen(cfg: RunConfig, args) -> dict[str, str]:
    return {}


def cmd_train(cfg: RunConfig, args) -> dict[str, str]:
    init = M.Model.init(cfg.model, derive_seed(cfg.seed, "init"))
    result = train(init, cfg.task, cfg.train)
    result.model.save(args.out / "checkpoint")
    held = gen_set(cfg.task, cfg.positions(), cfg.eval.per_position, derive_seed(cfg.seed, "heldout"))
    acc = evaluate(result.model, held, None, cfg.jobs)
    log.info("held-out accuracy %.4f", acc.overall)
    return {
        "loss.csv": result.loss_csv(),
        **_report(args.format, "eval", acc.to_csv(), acc.to_dict()),
    }


def cmd_analyze(cfg: RunConfig, args, model, instances) -> dict[str, str]:
    base = X.baseline_pass(model, instances, cfg.siw.top_p)
    sinks = [sink_profile(a) for a in base.attention]
    profile = sum(sinks) / len(sinks)
    decay = [sum(initial_decay(a, layer) for a in base.attention) / len(base.attention)
             for layer in range(model.config.n_layers)] if len({len(i.tokens) for i in instances}) == 1 else None
    files = {
        **_baseline_files(args.format, base),
        **_report(args.format, "sink", sink_csv(profile), [float(x) for x in profile]),
    }
    if decay is not None:
        files.update(_report(args.format, "decay", decay_csv(decay), [[float(x) for x in s] for s in decay]))
    else:
        log.warning("instances differ in length; decay report skipped")
    return files


def cmd_probe(cfg: RunConfig, args, model, instances) -> dict[str, str]:
    report = X.run_saliency_probe(model, instances, cfg.probe)
    origin = report.waves["Origin"]
    records = {s: report.waves[s].to_records() for s in X.PROBE_SETTINGS}
    return {
        **_report(args.format, "probe", report.to_csv(), records),
        **_report(args.format, "additivity", report.additivity_csv(), report.additivity),
        **_report(args.format, "wave", origin.to_csv(), origin.to_records()),
    }


def cmd_sweep(cfg: RunConfig, args, model, instances) -> dict[str, str]:
    res = X.run_siw_sweep(model, instances, cfg.sweep, cfg.jobs)
    return {**_baseline_files(args.format, res.baseline), **_report(args.format, "eval", res.table.to_csv(), res.table.to_records())}


def cmd_ablate(cfg: RunConfig, args, model, instances) -> dict[str, str]:
    res = X.run_layer_ablation(model, instances, cfg.ablation_ranges, cfg.siw, cfg.jobs)
    return {
        **_report(args.format, "eval", res.table.to_csv(), res.table.to_records()),
        **_report(args.format, "flow", res.flow.to_csv(), res.flow.to_records()),
        "ablation.csv": res.to_csv(),
    }


def cmd_combined(cfg: RunConfig, args, model, instances) -> dict[str, str]:
    if cfg.sphs is not None and cfg.sphs.dims and cfg.sphs.dims[-1] >= model.config.d_model:
        raise ConfigError("sphs.dims", f"dimension {cfg.sphs.dims[-1]} outside d_model={model.config.d_model}")
    res = X.run_combined(model, instances, cfg.combined(), cfg.jobs)
    return {**_baseline_files(args.format, res.baseline), **_report(args.format, "eval", res.table.to_csv(), res.table.to_records())}


def cmd_grad_check(cfg: RunConfig, args) -> dict[str, str]:
    model = M.Model.load(cfg.checkpoint) if cfg.checkpoint else M.Model.init(cfg.model, derive_seed(cfg.seed, "init"))
    sample = cfg.task.generate(0, derive_seed(cfg.seed, "grad-check"))
    err = grad_check(model, sample, args.eps, args.samples, cfg.seed)
    result = {"eps": args.eps, "max_relative_error": err, "bound": GRAD_CHECK_BOUND, "passed": err < GRAD_CHECK_BOUND,
              "params": model.num_params(), "samples": args.samples}
    print(f"max relative error {err:.3e} ({'ok' if result['passed'] else 'FAILED'}, bound {GRAD_CHECK_BOUND:g})")
    return {"grad_check.json": json.dumps(result, indent=2, sort_keys=True) + "\n"}


MODEL_COMMANDS: dict[str, Callable] = {
    "analyze": cmd_analyze,
    "probe": cmd_probe,
    "sweep": cmd_sweep,
    "ablate-layers": cmd_ablate,
    "combined": cmd_combined,
}


def run(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    args.out.mkdir(parents=True, exist_ok=True)
    extra: list[str] = []
    instances = []
    if args.command in MODEL_COMMANDS:
        model = _model(cfg)
        instances = _instances(cfg)
        files = MODEL_COMMANDS[args.command](cfg, args, model, instances)
    elif args.command == "gen":
        instances = _instances(cfg)
        files = cmd_gen(cfg, args)
    elif args.command == "train":
        files = cmd_train(cfg, args)
        extra = sorted(f"checkpoint/{p.name}" for p in (args.out / "checkpoint").iterdir())
    else:
        files = cmd_grad_check(cfg, args)
    X.write_run(args.out, cfg.to_dict(), instances, files, {"seed": cfg.seed, "train_seed": cfg.train.seed},
                hash_paths=extra)
    if args.command == "grad-check" and not json.loads(files["grad_check.json"])["passed"]:
        return 1
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"attncal: invalid config: {exc}", file=sys.stderr)
        return 1
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"attncal: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, TrainingDiverged) as exc:
        print(f"attncal: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
