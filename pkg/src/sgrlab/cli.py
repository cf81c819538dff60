"""Command-line entry point: ``sgrlab <command> [options]``.

Options resolve as defaults < ``--config`` file < explicit flags.  The config
file holds ``key = value`` lines (``#`` comments allowed); values are parsed
as JSON when possible, else kept as strings.  Every command writes its CSVs
plus one manifest JSON (``manifest-<command>[-<tag>].json``) into ``--out-dir``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, load_mnist, prepare, stratified_head
from .errors import ConfigError, ContractError, DegenerateEstimateError, FormatError, NumericError
from .evaluation import (EXPORT_SOURCES, WHITEBOX_COLUMNS, check_attack_names, collect_perturbations,
                         export_covariance, lrc_sweep, t_grid, trajectory, trajectory_rows, transfer_matrix,
                         whitebox_table, write_rows)
from .attacks import AttackConfig, run_attack
from .models import load_checkpoint
from .training import TrainConfig, train

log = logging.getLogger("sgrlab")

# keys accepted in a config file besides TrainConfig fields
DATA_KEYS = ("data_dir", "n_train", "n_test", "arch")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


# -- config ---------------------------------------------------------------

def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; all malformed lines are reported together."""
    out, problems = {}, []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{n}: expected key = value, got {raw.strip()!r}")
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "lambda":
            key = "lam"
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    unknown = sorted(k for k in out if k not in TRAIN_KEYS + DATA_KEYS)
    problems += [f"{source}: unknown key {k!r}" for k in unknown]
    if problems:
        raise ConfigError(problems)
    return out


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return parse_config_text(p.read_text(), str(p))


def model_config(arch: str, sample_shape, num_classes: int) -> dict:
    shape = [int(s) for s in sample_shape]
    d = int(np.prod(shape))
    if arch == "mlp":
        return {"kind": "mlp", "widths": [d, 256, 256, num_classes], "input_shape": shape}
    if arch == "linear":
        return {"kind": "linear", "input_shape": shape, "num_classes": num_classes}
    if arch == "convnet":
        return {"kind": "convnet", "input_shape": shape, "params": [32, 32, 64, 64, 200, 200, num_classes]}
    raise ConfigError(f"arch must be mlp, linear or convnet, got {arch!r}")


# -- shared plumbing --------------------------------------------------------

def _load_data(cfg: dict, split: str) -> Dataset:
    ds = load_mnist(cfg.get("data_dir"), split)
    n = cfg.get("n_train" if split == "train" else "n_test")
    return stratified_head(ds, None if n is None else int(n))


def _run_id(command: str, payload: dict) -> str:
    blob = json.dumps({"command": command, **payload}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, artifacts: dict, started: float,
                   extra: dict | None = None, tag: str | None = None) -> Path:
    """One manifest per command invocation; the run id hashes command, config and seed."""
    manifest = {
        "run_id": _run_id(command, {"config": config, "seed": seed}),
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest["results"] = extra
    path = out_dir / (f"manifest-{command}-{tag}.json" if tag else f"manifest-{command}.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _checkpoints(paths) -> dict:
    models = {}
    for p in paths:
        name = Path(p).stem
        if name in models:
            raise ConfigError(f"duplicate checkpoint name {name!r}")
        models[name] = load_checkpoint(p)
    return models


def _test_split(cfg, n=None):
    te = _load_data(cfg, "test")
    if n is not None:
        te = stratified_head(te, int(n))
    z, space = prepare(te)
    return te, z, space


# -- commands ---------------------------------------------------------------

def cmd_train(args, cfg: dict) -> dict:
    overrides = {
        "method": args.method, "lam": args.lam, "beta": args.beta, "batch_size": args.batch_size,
        "epochs": args.epochs, "lr": args.lr, "weight_decay": args.weight_decay, "pert_source": args.pert_source,
        "pert_eps": args.pert_eps, "pert_zeta": args.pert_zeta, "mix": args.mix, "adv_attack": args.adv_attack,
        "cov_mode": args.cov_mode,
        "cov_update_every": args.cov_update_every, "augment": args.augment, "uncentered": args.uncentered,
    }
    merged = dict(cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if args.arch is not None:
        merged["arch"] = args.arch
    merged["seed"] = args.seed
    tr, te = _load_data(merged, "train"), _load_data(merged, "test")
    tcfg_kwargs = {k: v for k, v in merged.items() if k in TRAIN_KEYS}
    if "model" not in tcfg_kwargs:
        tcfg_kwargs["model"] = model_config(merged.get("arch", "mlp"), tr.sample_shape, tr.num_classes)
    tcfg = TrainConfig(**tcfg_kwargs)
    name = args.name or tcfg.method
    out = args.out_dir
    res = train(tr, te, tcfg, log_path=out / f"{name}-log.csv", checkpoint_path=out / f"{name}.npz")
    return {"config": tcfg.hyper() | {k: merged[k] for k in DATA_KEYS if k in merged},
            "artifacts": {"log": out / f"{name}-log.csv", "checkpoint": out / f"{name}.npz"},
            "results": {"final_test_acc": res.log[-1]["test_acc"] if res.log else None, "c": res.c},
            "tag": name}


def cmd_whitebox(args, cfg: dict) -> dict:
    check_attack_names(args.attacks)
    models = _checkpoints(args.checkpoints)
    te, z, space = _test_split(cfg, args.n)
    rows = whitebox_table(models, z, te.labels, space, args.eps, args.attacks, args.seed, args.nb_iter,
                          args.rho_samples)
    path = write_rows(args.out_dir / "whitebox.csv", ["model", "eps"] + list(args.attacks), rows)
    conf = {"checkpoints": args.checkpoints, "attacks": args.attacks, "eps": args.eps, "nb_iter": args.nb_iter,
            "n": args.n, "rho_samples": args.rho_samples}
    return {"config": conf, "artifacts": {"whitebox": path}}


def cmd_transfer(args, cfg: dict) -> dict:
    models = _checkpoints(args.checkpoints)
    te, z, space = _test_split(cfg, args.n)
    rows = transfer_matrix(models, z, te.labels, space, args.eps, args.nb_iter, args.seed)
    path = write_rows(args.out_dir / "transfer.csv", ["model"] + list(models), rows)
    conf = {"checkpoints": args.checkpoints, "eps": args.eps, "nb_iter": args.nb_iter, "n": args.n}
    return {"config": conf, "artifacts": {"transfer": path}}


def cmd_lrc_sweep(args, cfg: dict) -> dict:
    models = _checkpoints(args.checkpoints)
    te, z, space = _test_split(cfg, args.n)
    rows = lrc_sweep(models, z, te.labels, space, args.zeta, args.eps, args.k, args.seed)
    path = write_rows(args.out_dir / "lrc-sweep.csv", ["model", "zeta", "eps", "k", "accuracy"], rows)
    conf = {"checkpoints": args.checkpoints, "zeta": args.zeta, "eps": args.eps, "k": args.k, "n": args.n}
    return {"config": conf, "artifacts": {"lrc_sweep": path}}


def cmd_export_cov(args, cfg: dict) -> dict:
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    split = "train" if args.source == "dataset_cov" else "test"
    ds = stratified_head(_load_data(cfg, split), args.n)
    z, space = prepare(ds)
    xi = collect_perturbations(model, z, space, args.source, args.eps, args.seed, args.nb_iter, args.zeta)
    crop = None if args.crop <= 0 else args.crop
    out = export_covariance(xi, ds.geometry, args.out_dir, args.source, crop)
    conf = {"checkpoint": args.checkpoint, "source": args.source, "eps": args.eps, "n": args.n, "crop": args.crop,
            "split": split}
    return {"config": conf, "artifacts": out["paths"], "results": {"decay_length": out["decay_length"]},
            "tag": args.source}


def cmd_trajectory(args, cfg: dict) -> dict:
    model = load_checkpoint(args.checkpoint)
    te = _load_data(cfg, "test")
    if not 0 <= args.index < len(te):
        raise ContractError(f"sample index {args.index} outside [0, {len(te)})")
    one = te.take([args.index])
    z, space = prepare(one)
    acfg = AttackConfig(args.attack, eps=args.eps)
    adv = run_attack(model, z, one.labels, acfg, np.random.default_rng(args.seed), space)
    ts = t_grid(args.t_min, args.t_max, args.steps)
    probs = trajectory(model, z[0], adv[0] - z[0], ts)
    header = ["t"] + [f"p{k}" for k in range(model.num_classes)]
    path = write_rows(args.out_dir / f"trajectory-{args.index}.csv", header, trajectory_rows(probs, ts))
    conf = {"checkpoint": args.checkpoint, "index": args.index, "attack": args.attack, "eps": args.eps,
            "t_min": args.t_min, "t_max": args.t_max, "steps": args.steps}
    return {"config": conf, "artifacts": {"trajectory": path}, "results": {"label": int(one.labels[0])},
            "tag": str(args.index)}


COMMANDS = {"train": cmd_train, "whitebox": cmd_whitebox, "transfer": cmd_transfer, "lrc-sweep": cmd_lrc_sweep,
            "export-cov": cmd_export_cov, "trajectory": cmd_trajectory}


# -- argument parsing ---------------------------------------------------------

def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand.  The copy on
    # each subparser suppresses its defaults so it cannot clobber values
    # given before the subcommand name.
    def d(v):
        return argparse.SUPPRESS if suppress else v

    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=d(None),
                   help="key = value file (TrainConfig fields, data_dir, n_train, n_test, arch)")
    g.add_argument("--seed", type=int, default=d(0))
    g.add_argument("--out-dir", type=Path, default=d(Path("runs")))
    g.add_argument("--threads", type=int, default=d(None), help="BLAS thread cap")
    g.add_argument("--data-dir", default=d(None), help="overrides $SGRLAB_DATA_DIR")
    g.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="sgrlab", description=__doc__.splitlines()[0],
                                parents=[_global_flags(suppress=False)])
    p.add_argument("--version", action="version", version=f"sgrlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--method", choices=["clean", "wdecay", "adv_augment", "gn", "sgr"])
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--pert-source")
    t.add_argument("--pert-eps", type=float)
    t.add_argument("--pert-zeta", type=float, help="LRC decay length when --pert-source lrc")
    t.add_argument("--mix", type=float)
    t.add_argument("--adv-attack", choices=["fgsm", "pgd"])
    t.add_argument("--cov-mode", choices=["dense", "radial"])
    t.add_argument("--cov-update-every", type=float)
    t.add_argument("--augment", type=_bool, metavar="BOOL")
    t.add_argument("--uncentered", type=_bool, metavar="BOOL")
    t.add_argument("--arch", choices=["mlp", "linear", "convnet"])
    t.add_argument("--name", help="stem for checkpoint and log files (default: method)")

    w = sub.add_parser("whitebox", parents=[common], help="white-box accuracy table")
    w.add_argument("checkpoints", nargs="+")
    w.add_argument("--attacks", nargs="+", default=list(WHITEBOX_COLUMNS))
    w.add_argument("--eps", nargs="+", type=float, default=[32.0], help="1/255 units")
    w.add_argument("--nb-iter", type=int, default=10)
    w.add_argument("--n", type=int, default=None, help="test samples (default all)")
    w.add_argument("--rho-samples", type=int, default=None, help="samples for the DeepFool column")

    x = sub.add_parser("transfer", parents=[common], help="PGD transfer matrix")
    x.add_argument("checkpoints", nargs="+")
    x.add_argument("--eps", type=float, default=32.0)
    x.add_argument("--nb-iter", type=int, default=40)
    x.add_argument("--n", type=int, default=None)

    s = sub.add_parser("lrc-sweep", parents=[common], help="worst-of-k LRC noise sweep")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--zeta", nargs="+", type=float, default=[1, 2, 4, 8, 16])
    s.add_argument("--eps", nargs="+", type=float, default=[0.0, 0.1, 0.3, 0.5, 0.7], help="noise multiples")
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--n", type=int, default=None)

    e = sub.add_parser("export-cov", parents=[common], help="perturbation covariance matrix and covfun")
    e.add_argument("--checkpoint")
    e.add_argument("--source", choices=EXPORT_SOURCES, default="pgd")
    e.add_argument("--eps", type=float, default=8.0, help="1/255 units (gradient attacks)")
    e.add_argument("--nb-iter", type=int, default=10)
    e.add_argument("--zeta", type=float, default=8.0)
    e.add_argument("--n", type=int, default=1000)
    e.add_argument("--crop", type=float, default=0.25, help="fraction trimmed per side; 0 keeps the raw matrix")

    j = sub.add_parser("trajectory", parents=[common], help="softmax along x + t * perturbation")
    j.add_argument("checkpoint")
    j.add_argument("--index", type=int, default=0)
    j.add_argument("--attack", choices=["fgsm", "pgd", "fgm", "rand", "deepfool"], default="pgd")
    j.add_argument("--eps", type=float, default=32.0)
    j.add_argument("--t-min", type=float, default=-5.0)
    j.add_argument("--t-max", type=float, default=5.0)
    j.add_argument("--steps", type=int, default=101)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = load_config(args.config)
        if args.data_dir is not None:
            cfg["data_dir"] = args.data_dir
        args.out_dir.mkdir(parents=True, exist_ok=True)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            threadpool_limits(args.threads)
        out = COMMANDS[args.command](args, cfg)
        path = write_manifest(args.out_dir, args.command, out["config"], args.seed, out["artifacts"], started,
                              out.get("results"), out.get("tag"))
    except ConfigError as exc:
        problems = exc.problems if getattr(exc, "problems", None) else [str(exc)]
        for msg in problems:
            print(f"config error: {msg}", file=sys.stderr)
        return 2
    except (FileNotFoundError, FormatError, ContractError, NumericError, DegenerateEstimateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
