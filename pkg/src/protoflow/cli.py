"""Command-line entry point for datasets, training, evaluation and reports.

Four subcommands cover the whole workflow:

    protoflow synth    write a synthetic feature file
    protoflow train    meta-train the flow network on a feature file
    protoflow eval     episode accuracy for a prototype method
    protoflow analyze  diagnostic reports (bias measurements, curves)

Every command is deterministic given its flags, and every command that
writes an output file also writes the fully resolved run configuration
next to it as ``<output>.config.json``.  Validation happens before any
file is touched, so failed runs leave no partial outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import analysis, episodes, gradnet, metatrain, odeflow
from .config import PAPER_PRESET, RunConfig, merge_documents
from .errors import ProtoflowError

__all__ = ["main", "build_parser"]


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _time_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad time list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoflow",
        description="Prototype rectification by an integrated gradient flow.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature file")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.35)
    p.add_argument("--min-angle", type=float, default=25.0)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--first-class-id", type=_nonneg_int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="meta-train the flow network")
    p.add_argument("--config", help="run configuration JSON file")
    p.add_argument("--preset", choices=("paper",),
                   help="start from a named schedule instead of the defaults")
    p.add_argument("--data", required=True, help="base-split feature file")
    p.add_argument("--val", help="validation feature file")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--mode", choices=episodes.MODES)
    p.add_argument("--epochs", type=_nonneg_int)
    p.add_argument("--seed", type=_nonneg_int)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="episode accuracy for a prototype method")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--n-way", type=_positive_int, default=5)
    p.add_argument("--k-shot", type=_positive_int, default=1)
    p.add_argument("--m-query", type=_positive_int, default=15)
    p.add_argument("--episodes", type=_positive_int, default=600)
    p.add_argument("--mode", choices=episodes.MODES, default="transductive")
    p.add_argument("--method", choices=analysis.METHODS, default="metanode")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--gda-eta", type=float, default=0.1)
    p.add_argument("--gda-steps", type=_positive_int, default=20)
    p.add_argument("--out", help="write the per-episode CSV report here")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("analyze", help="diagnostic reports from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True,
                   choices=("proto-bias", "grad-bias", "convergence", "trajectory"))
    p.add_argument("--times", type=_time_list, default=(1.0, 5.0, 10.0, 20.0, 40.0))
    p.add_argument("--n-way", type=_positive_int, default=5)
    p.add_argument("--k-shot", type=_positive_int, default=1)
    p.add_argument("--m-query", type=_positive_int, default=15)
    p.add_argument("--episodes", type=_positive_int, default=600)
    p.add_argument("--mode", choices=episodes.MODES, default="transductive")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_analyze)

    return parser


# -- provenance -----------------------------------------------------------------


def _write_config(out_path: str, overrides: dict) -> None:
    run_cfg = RunConfig.from_dict(overrides)
    with open(f"{out_path}.config.json", "w", encoding="ascii") as fh:
        fh.write(run_cfg.to_json())


def _protocol_overrides(args) -> dict:
    return {
        "n_way": args.n_way,
        "k_shot": args.k_shot,
        "m_query": args.m_query,
        "mode": args.mode,
        "episodes": args.episodes,
        "seed": args.seed,
    }


# -- command handlers -------------------------------------------------------------


def cmd_synth(args) -> int:
    ds = episodes.synth_dataset(args.classes, args.dim, args.per_class,
                                noise_sigma=args.noise,
                                min_center_angle_deg=args.min_angle,
                                seed=args.seed,
                                first_class_id=args.first_class_id)
    episodes.save_features(ds, args.out)
    _write_config(args.out, {"episodes": {
        "classes": args.classes, "dim": args.dim, "per_class": args.per_class,
        "noise": args.noise, "min_angle": args.min_angle, "seed": args.seed,
    }})
    total = ds.num_classes * args.per_class
    print(f"wrote {total} feature rows ({ds.num_classes} classes, "
          f"dim {ds.dim}) to {args.out}")
    return 0


def _train_document(args, data_dim: int) -> dict:
    overrides: dict = {}
    if args.preset == "paper":
        overrides = merge_documents(overrides, PAPER_PRESET)
    if args.config:
        with open(args.config, encoding="ascii") as fh:
            file_doc = RunConfig.from_json(fh.read()).document
        overrides = merge_documents(overrides, file_doc)
    train_flags = {}
    if args.mode is not None:
        train_flags["mode"] = args.mode
    if args.epochs is not None:
        train_flags["epochs"] = args.epochs
    if args.seed is not None:
        train_flags["seed"] = args.seed
    if train_flags:
        overrides = merge_documents(overrides, {"train": train_flags})
    return merge_documents(overrides, {"gradnet": {"feature_dim": data_dim}})


def cmd_train(args) -> int:
    base = episodes.load_features(args.data)
    val = episodes.load_features(args.val, split="novel") if args.val else None
    run_cfg = RunConfig.from_dict(_train_document(args, base.dim))
    net_cfg = run_cfg.gradnet_config()
    train_cfg = run_cfg.train_config()

    result = metatrain.train(base, net_cfg, train_cfg, val_ds=val)
    gradnet.save_checkpoint(args.out_checkpoint, net_cfg, result.params)
    with open(f"{args.out_checkpoint}.log.csv", "w", encoding="ascii") as fh:
        fh.write(metatrain.format_log(result.log))
    with open(f"{args.out_checkpoint}.config.json", "w", encoding="ascii") as fh:
        fh.write(run_cfg.to_json())
    last = result.log[-1].mean_loss if result.log else float("nan")
    print(f"trained {train_cfg.epochs} epochs "
          f"({train_cfg.episodes_per_epoch} episodes each, {train_cfg.mode}); "
          f"final mean loss {last:.6f}; "
          f"checkpoint {args.out_checkpoint}")
    return 0


def _load_for_eval(args, ds):
    if args.method != "metanode":
        return None, None
    if not args.checkpoint:
        raise ProtoflowError("--method metanode requires --checkpoint")
    net_cfg, params = gradnet.load_checkpoint(args.checkpoint)
    if net_cfg.feature_dim != ds.dim:
        raise ProtoflowError(
            f"checkpoint feature dim {net_cfg.feature_dim} does not match "
            f"data dim {ds.dim}")
    return net_cfg, params


def cmd_eval(args) -> int:
    ds = episodes.load_features(args.data)
    net_cfg, params = _load_for_eval(args, ds)
    protocol = analysis.EvalProtocol(**_protocol_overrides(args))
    report = analysis.evaluate(params, net_cfg, ds, protocol,
                               method=args.method, threads=args.threads,
                               gda_eta=args.gda_eta, gda_steps=args.gda_steps)
    sys.stdout.write(analysis.format_report_summary(report, label=args.method))
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(analysis.format_report_csv(report))
        overrides = {"eval": {**_protocol_overrides(args),
                              "method": args.method,
                              "gda_eta": args.gda_eta,
                              "gda_steps": args.gda_steps}}
        if net_cfg is not None:
            overrides["gradnet"] = dataclasses.asdict(net_cfg)
        _write_config(args.out, overrides)
    return 0


def _trajectory_text(params, net_cfg, ds, protocol) -> str:
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=protocol.seed, spawn_key=(0,))))
    ep = episodes.sample_episode(ds, protocol.n_way, protocol.k_shot,
                                 protocol.m_query, mode=protocol.mode, seed=rng)
    solve_cfg = odeflow.SolveConfig(record_trajectory=True)
    result = odeflow.rectify(params, net_cfg, ep, solve_cfg=solve_cfg)
    return odeflow.format_trajectory(result.trajectory)


def cmd_analyze(args) -> int:
    ds = episodes.load_features(args.data)
    net_cfg, params = gradnet.load_checkpoint(args.checkpoint)
    if net_cfg.feature_dim != ds.dim:
        raise ProtoflowError(
            f"checkpoint feature dim {net_cfg.feature_dim} does not match "
            f"data dim {ds.dim}")
    protocol = analysis.EvalProtocol(**_protocol_overrides(args))

    if args.report == "proto-bias":
        sim_init, sim_opt = analysis.prototype_bias(params, net_cfg, ds, protocol)
        text = ("# sim_initial,sim_optimal\n"
                "%.10g,%.10g\n" % (sim_init, sim_opt))
    elif args.report == "grad-bias":
        rep = analysis.gradient_bias(params, net_cfg, ds, protocol)
        text = ("# sim_averaged,sim_inferred,episodes_used,excluded\n"
                "%.10g,%.10g,%d,%d\n"
                % (rep.sim_averaged, rep.sim_inferred,
                   rep.episodes_used, rep.excluded))
    elif args.report == "convergence":
        points = analysis.convergence_curve(params, net_cfg, ds, protocol,
                                            times=args.times,
                                            threads=args.threads)
        text = analysis.format_curve_csv(points)
    else:
        text = _trajectory_text(params, net_cfg, ds, protocol)

    with open(args.out, "w", encoding="ascii") as fh:
        fh.write(text)
    overrides = {"eval": _protocol_overrides(args),
                 "gradnet": dataclasses.asdict(net_cfg)}
    _write_config(args.out, overrides)
    print(f"wrote {args.report} report to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ProtoflowError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
