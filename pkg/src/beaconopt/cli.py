"""Command-line entry point: ``beaconopt {train,eval,baseline,gen-map}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .beacon_layer import Placement
from .config import ConfigError, ExperimentConfig, load_config
from .geometry import MapError, rectangular_map, save_map
from .net import load_weights, save_weights
from .training import TrainingDiverged, TrainResult, load_checkpoint, save_checkpoint, \
    train_inference_only, train_joint

log = logging.getLogger("beaconopt")


class UsageError(Exception):
    pass


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_training_artifacts(res: TrainResult, cfg: ExperimentConfig, out: Path,
                              started: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_weights(res.net, out / "weights.npz")
    res.placement.save(out / "placement.json")
    with open(out / "train_log.jsonl", "w") as fh:
        for rec in res.log:
            fh.write(json.dumps(rec.to_dict()) + "\n")
    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    for it, slots in res.snapshots:
        Placement(res.placement.sites, slots, res.placement.n_channels,
                  cfg.map.name).save(snaps / f"placement_{it:08d}.json")
    _dump(cfg.raw, out / "config.json")
    # timestamps and timings live apart from the deterministic artifacts
    _dump({"started": started, "finished": time.time(),
           "wall_clock": [[r.iter, r.wall_clock] for r in res.log]}, out / "run_meta.json")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override, args.seed)
    out = Path(args.out) if args.out else cfg.run_dir
    started = time.time()

    def checkpoint(state):
        save_checkpoint(state, out / "checkpoint", cfg.map)

    resume = load_checkpoint(args.resume) if args.resume else None
    kwargs = {"on_checkpoint": checkpoint, "checkpoint_period": args.checkpoint_period}
    try:
        if args.placement:
            placement = Placement.load(args.placement)
            res = train_inference_only(cfg.map, cfg.propagation, placement, cfg.net, cfg.train,
                                       resume=resume, **kwargs)
        else:
            res = train_joint(cfg.map, cfg.propagation, cfg.net, cfg.train, resume=resume,
                              **kwargs)
    except TrainingDiverged as exc:
        save_checkpoint(exc.state, out / "checkpoint", cfg.map)
        _dump(exc.record.to_dict(timing=True), out / "diverged.json")
        print(f"error: {exc}; state dumped to {out / 'checkpoint'}", file=sys.stderr)
        return 3
    _write_training_artifacts(res, cfg, out, started)
    print(f"trained {cfg.run_name}: {res.placement.beacon_count} beacons, "
          f"final loss {res.log[-1].loss:.5f} -> {out}" if res.log else f"wrote {out}")
    return 0


def _predictor(args, cfg: ExperimentConfig, placement: Placement):
    if args.oracle:
        return ev.TrueLocationOracle(), "oracle"
    if args.knn:
        db = ev.knn_build(placement, cfg.map, cfg.propagation, cfg.knn["rows"], cfg.knn["cols"],
                          np.random.default_rng(cfg.knn["seed"]), k=args.knn)
        return db, f"knn({args.knn})"
    if not args.weights:
        raise UsageError("eval needs --weights, --knn K or --oracle")
    net = load_weights(args.weights)
    if net.config.input_dim != placement.n_channels:
        raise UsageError(f"dimension mismatch: weights expect C={net.config.input_dim} "
                         f"but the placement uses C={placement.n_channels}")
    return ev.NetPredictor(net), "net"


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.override, args.seed)
    placement = Placement.load(args.placement)
    predictor, label = _predictor(args, cfg, placement)
    report = ev.evaluate(placement, predictor, cfg.map, cfg.propagation, cfg.eval, label)
    out = Path(args.out) if args.out else cfg.run_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    stem = label.replace("(", "").replace(")", "")
    report.save(out / f"report_{stem}.json")
    ev.error_map(report, out / f"error_map_{stem}.csv")
    print(report.summary())
    return 0


def _parse_spacing(text: str):
    parts = [float(x) for x in text.split(",")]
    if len(parts) == 1:
        return parts[0]
    if len(parts) == 2:
        return tuple(parts)
    raise UsageError(f"spacing {text!r} must be one number or 'dx,dy'")


def cmd_baseline(args) -> int:
    cfg = load_config(args.config, args.override, args.seed)
    out = Path(args.out) if args.out else cfg.run_dir / "baseline"
    out.mkdir(parents=True, exist_ok=True)
    if args.handcrafted:
        spacing, rule = args.handcrafted
        if rule not in ("round_robin", "random"):
            raise UsageError(f"invalid channel_rule {rule!r}: use round_robin or random")
        placement = ev.handcrafted_placement(cfg.map, cfg.channels, _parse_spacing(spacing), rule,
                                             cfg.train.seed)
    elif args.preset:
        placement = ev.handcrafted_preset(cfg.map, cfg.channels, args.preset)
    elif args.placement:
        placement = Placement.load(args.placement)
    else:
        raise UsageError("baseline needs --handcrafted, --preset or --placement")
    placement.save(out / "placement.json")
    print(f"placement: {placement.beacon_count} beacons")
    if args.train_net:
        res = train_inference_only(cfg.map, cfg.propagation, placement, cfg.net, cfg.train)
        save_weights(res.net, out / "weights.npz")
        report = ev.evaluate(placement, ev.NetPredictor(res.net), cfg.map, cfg.propagation,
                             cfg.eval, "net")
        report.save(out / "report_net.json")
        ev.error_map(report, out / "error_map_net.csv")
        print(report.summary())
    if args.knn_sweep:
        db = ev.knn_build(placement, cfg.map, cfg.propagation, cfg.knn["rows"], cfg.knn["cols"],
                          np.random.default_rng(cfg.knn["seed"]))
        reports, best = ev.knn_sweep(placement, cfg.map, cfg.propagation, cfg.eval, db,
                                     cfg.knn["ks"])
        for k, rep in reports.items():
            rep.save(out / f"report_knn{k}.json")
            print(rep.summary())
        _dump({"best_k": best, "rmse": {str(k): r.rmse for k, r in reports.items()},
               "best": reports[best].to_dict() | {"error_grid": None}}, out / "knn_summary.json")
        print(f"best k={best}")
    return 0


def cmd_gen_map(args) -> int:
    spec = rectangular_map(args.width, args.height, args.dividers, args.door, args.rows,
                           args.cols, args.name)
    save_map(spec, args.out)
    print(f"wrote {args.out}: {len(spec.walls)} walls, {spec.n_candidates} candidates")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beaconopt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="config JSON file or preset name")
        sp.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. train.total_iters=1000")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("train", help="joint (or inference-only) training")
    common(sp)
    sp.add_argument("--placement", help="fixed placement file: train the network only")
    sp.add_argument("--checkpoint-period", type=int, default=0)
    sp.add_argument("--resume", help="checkpoint directory to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a placement with a predictor")
    common(sp)
    sp.add_argument("placement")
    grp = sp.add_mutually_exclusive_group()
    grp.add_argument("weights", nargs="?")
    grp.add_argument("--knn", type=int)
    grp.add_argument("--oracle", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("baseline", help="handcrafted placements and kNN sweeps")
    common(sp)
    sp.add_argument("--handcrafted", nargs=2, metavar=("SPACING", "CHANNEL_RULE"))
    sp.add_argument("--preset", choices=sorted(ev.HANDCRAFTED_PRESETS))
    sp.add_argument("--placement")
    sp.add_argument("--knn-sweep", action="store_true")
    sp.add_argument("--train-net", action="store_true")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("gen-map", help="write a rectangular map with room dividers")
    sp.add_argument("out")
    sp.add_argument("--width", type=float, default=1.0)
    sp.add_argument("--height", type=float, default=0.7)
    sp.add_argument("--dividers", type=int, default=0)
    sp.add_argument("--door", type=float, default=0.2)
    sp.add_argument("--rows", type=int, default=25)
    sp.add_argument("--cols", type=int, default=25)
    sp.add_argument("--name", default="rect")
    sp.set_defaults(func=cmd_gen_map)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigError, MapError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
