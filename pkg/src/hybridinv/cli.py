"""Command-line front end; run ``hybridinv <command> --help`` for details.

Every command reads an optional key-value config (or a manifest written by
an earlier run), writes its outputs under ``--out`` and leaves a
``manifest-<command>.json`` there. Exit codes: 0 success, 2 config error,
3 I/O or missing input, 4 numerical failure.
"""

import argparse
import csv
from dataclasses import replace
import json
import os
import re
import sys

import numpy as np

from . import pipeline as pl
from .dictionary import save_dictionary, voxel_dictionary
from .errors import (ConfigError, InvalidSpec, MaxIterationsExceeded, Misalignment, MissingArtifact,
                     ProtocolMismatch, UnknownLayerTag)
from .neural import dump_activations, load_model, save_model, write_activations_csv

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def scenario_tag(name):
    """File-name friendly scenario label: ``perturbed(5)`` -> ``perturbed5``."""
    return re.sub(r"[^A-Za-z0-9.]+", "", name)


def _path(cfg, name):
    return os.path.join(cfg.out, name)


def _write_loss(path, losses):
    with open(path, "w", newline="") as fh:
        fh.write("# hybridinv-loss v1\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])


def _test_set(cfg):
    return pl.load_dataset(_path(cfg, "test.csv"))


# --------------------------------------------------------------------------
# commands; each returns the list of files it wrote


def cmd_gen_protocol(cfg, args):
    path = _path(cfg, "protocol.csv")
    cfg.get_protocol().save(path)
    return [path]


def _parse_orientations(text, K):
    try:
        U = [np.array([float(v) for v in part.split(",")]) for part in text.split(";")]
    except ValueError as exc:
        raise ConfigError(f"bad orientation list {text!r}") from exc
    if len(U) != K or any(u.shape != (3,) for u in U):
        raise ConfigError(f"need {K} orientations given as 'x,y,z;x,y,z'")
    return [u / np.linalg.norm(u) for u in U]


def cmd_gen_dict(cfg, args):
    default = ";".join(["0,0,1", "1,0,0", "0,1,0", "1,1,0"][:cfg.K])
    U = _parse_orientations(args.orientations or default, cfg.K)
    D = voxel_dictionary(cfg.grid(), U, cfg.get_protocol())
    path = _path(cfg, "dictionary")
    save_dictionary(D, path)
    return [os.path.join(path, f) for f in ("header.csv", "columns.csv", "atoms.csv")]


def cmd_gen_data(cfg, args):
    out = []
    for split in ("train", "test"):
        path = _path(cfg, f"{split}.csv")
        pl.save_dataset(pl.gen_dataset(cfg, split), path)
        out.append(path)
    return out


def _scenarios(cfg, args):
    return tuple(args.scenario) if getattr(args, "scenario", None) else cfg.scenarios


def cmd_fit_fingerprint(cfg, args):
    test = _test_set(cfg)
    out = []
    for scn in _scenarios(cfg, args):
        path = _path(cfg, f"fingerprint_{scenario_tag(scn)}.csv")
        pl.save_predictions(pl.run_fingerprint(cfg, test, scn), path)
        out.append(path)
    return out


def cmd_stage1(cfg, args):
    train = pl.load_dataset(_path(cfg, "train.csv"))
    path = _path(cfg, "stage1_train.csv")
    pl.save_stage1(pl.stage1_dataset(cfg, train), path)
    out = [path]
    test = _test_set(cfg)
    for scn in _scenarios(cfg, args):
        path = _path(cfg, f"stage1_test_{scenario_tag(scn)}.csv")
        pl.save_stage1(pl.stage1_dataset(cfg, test, scn), path)
        out.append(path)
    return out


def cmd_train_hybrid(cfg, args):
    train = pl.load_dataset(_path(cfg, "train.csv"))
    feats = pl.load_stage1(_path(cfg, "stage1_train.csv"))
    if feats.weights.shape != (len(train), cfg.grid().size * cfg.K):
        raise Misalignment("stage-1 features do not match the training set and grid")
    model, losses = pl.train_hybrid(cfg, train, feats)
    out = [_path(cfg, "hybrid_model.json"), _path(cfg, "hybrid_loss.csv")]
    save_model(model, out[0], {"method": "hybrid", "config_sha256": cfg.digest()})
    _write_loss(out[1], losses)
    test = _test_set(cfg)
    for scn in _scenarios(cfg, args):
        tf = pl.load_stage1(_path(cfg, f"stage1_test_{scenario_tag(scn)}.csv"))
        path = _path(cfg, f"predictions_hybrid_{scenario_tag(scn)}.csv")
        pl.save_predictions(pl.predict_hybrid(cfg, model, test, tf, scn), path)
        out.append(path)
    return out


def cmd_train_full(cfg, args):
    train = pl.load_dataset(_path(cfg, "train.csv"))
    model, losses = pl.train_full(cfg, train)
    out = [_path(cfg, "full_model.json"), _path(cfg, "full_loss.csv"), _path(cfg, "predictions_full.csv")]
    save_model(model, out[0], {"method": "full", "config_sha256": cfg.digest()})
    _write_loss(out[1], losses)
    pl.save_predictions(pl.predict_full(cfg, model, _test_set(cfg)), out[2])
    return out


def cmd_eval(cfg, args):
    test = _test_set(cfg)
    names = [f"fingerprint_{scenario_tag(s)}.csv" for s in cfg.scenarios]
    names += [f"predictions_hybrid_{scenario_tag(s)}.csv" for s in cfg.scenarios]
    names += ["predictions_full.csv"]
    reports = []
    for name in names:
        if os.path.isfile(_path(cfg, name)):
            reports.append(pl.evaluate(pl.load_predictions(_path(cfg, name)), test, cfg))
    if not reports:
        raise MissingArtifact(f"no prediction files in {cfg.out}; run fit-fingerprint / train-* first")
    out = [_path(cfg, "eval_report.csv"), _path(cfg, "eval_summary.json")]
    pl.write_reports(reports, out[0])
    summary = [{"method": r.rows[0]["method"], "scenario": r.rows[0]["scenario"],
                "mae": {p: r.mae(p) for p in pl.PARAMETERS}, "timing": r.timing, "residual": r.residual}
               for r in reports]
    with open(out[1], "w") as fh:
        json.dump({"format": "hybridinv-eval-summary", "version": 1, "reports": summary}, fh, indent=2)
    return out


def cmd_bench(cfg, args):
    path = _path(cfg, "bench.csv")
    pl.write_bench(pl.benchmark(cfg), path)
    return [path]


def cmd_dump_activations(cfg, args):
    model, _ = load_model(_path(cfg, f"{args.model}_model.json"))
    if args.model == "hybrid":
        X = pl.load_stage1(_path(cfg, "stage1_test_groundtruth.csv")).weights
    else:
        X = _test_set(cfg).signals
    X = X[:args.samples]
    tags = args.layers.split(",") if args.layers else [t for t in model.tags if t != "output"]
    path = _path(cfg, f"activations_{args.model}.csv")
    write_activations_csv(path, dump_activations(model, X, tags))
    return [path]


COMMANDS = {
    "gen-protocol": (cmd_gen_protocol, "write the acquisition protocol CSV"),
    "gen-dict": (cmd_gen_dict, "write a dictionary bundle for fixed orientations"),
    "gen-data": (cmd_gen_data, "simulate the training and test sets"),
    "fit-fingerprint": (cmd_fit_fingerprint, "exhaustive dictionary fit of the test set"),
    "stage1": (cmd_stage1, "stage-1 NNLS features for both splits"),
    "train-hybrid": (cmd_train_hybrid, "train the split MLP on stage-1 features and predict"),
    "train-full": (cmd_train_full, "train the plain MLP on raw signals and predict"),
    "eval": (cmd_eval, "MAE tables for every available prediction file"),
    "bench": (cmd_bench, "per-voxel inference timings"),
    "dump-activations": (cmd_dump_activations, "export hidden-layer activations"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key-value config or manifest JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (u64)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")
    parser = argparse.ArgumentParser(prog="hybridinv", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}
    for name, (_, help_text) in COMMANDS.items():
        subs[name] = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    for name in ("fit-fingerprint", "stage1", "train-hybrid"):
        subs[name].add_argument("--scenario", action="append",
                                help="orientation scenario (repeatable); default: all configured")
    subs["gen-dict"].add_argument("--orientations", help="K unit vectors as 'x,y,z;x,y,z'")
    subs["dump-activations"].add_argument("--model", choices=("hybrid", "full"), default="hybrid")
    subs["dump-activations"].add_argument("--layers", help="comma-separated layer tags")
    subs["dump-activations"].add_argument("--samples", type=int, default=100)
    return parser


def resolve_config(args):
    cfg = pl.load_config(args.config) if getattr(args, "config", None) else pl.ExperimentConfig()
    changes = {k: getattr(args, k) for k in ("seed", "out", "threads") if hasattr(args, k)}
    if "seed" in changes and not 0 <= changes["seed"] < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    try:
        return replace(cfg, **changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        os.makedirs(cfg.out, exist_ok=True)
        fn, _ = COMMANDS[args.command]
        outputs = fn(cfg, args)
        manifest = pl.write_manifest(cfg.out, args.command, cfg, outputs)
    except (ConfigError, InvalidSpec, ProtocolMismatch, UnknownLayerTag) as exc:
        print(f"hybridinv: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, Misalignment, OSError) as exc:
        print(f"hybridinv: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MaxIterationsExceeded, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"hybridinv: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for path in outputs:
        print(path)
    print(manifest)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
