"""Command-line entry point.

Settings come from (lowest to highest precedence): built-in defaults, the
JSON document given by ``--config``, then explicit flags. The default seed is
read from ``EPHYSLAB_SEED`` when set. Results go to stdout as JSON; logs go
to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import ingest, scalinglab
from .config import ModelConfig, MuPConfig
from .ndcore import ConfigError, DataError

log = logging.getLogger("ephyslab")

SEED_ENV = "EPHYSLAB_SEED"

# keys accepted in a config file, per subcommand (flags use the same names with '-')
DEFAULTS = {
    "preprocess": {"input": None, "output": None, "highpass_hz": 0.3},
    "pretrain": {"output": None, "data": None, "synthetic": False, "n_segments": 64, "n_test": 8,
                 "n_channels": 4, "steps": 200, "lr": 1e-2, "batch_size": 4, "warmup_frac": 0.05,
                 "base_width": None, "model": {}},
    "verify": {"output": None, "break_rope": False, "n_layers": 2},
    "fit": {"observations": None, "output": None},
    "frontier": {"law": None, "output": None, "unique_tokens": scalinglab.IEEG_UNIQUE_TOKENS,
                 "params": list(scalinglab.MODEL_GRID_1S), "epochs": list(scalinglab.EPOCH_GRID),
                 "budgets": None, "flops_k": 6.0},
    "report": {"output": None, "models": None, "ref_channel_hours": scalinglab.REFERENCE_CHANNEL_HOURS},
}


class UsageError(ValueError):
    pass


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicitly given flags; reject unknown keys."""
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    loaded: dict = {}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must be a JSON object")
        unknown = set(loaded) - set(cfg) - {"seed"}
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {', '.join(sorted(unknown))}")
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = val
    if getattr(args, "d_model", None) is not None:
        cfg["model"] = {**cfg.get("model", {}), "d_model": args.d_model}
    if getattr(args, "n_layers_model", None) is not None:
        cfg["model"] = {**cfg.get("model", {}), "n_layers": args.n_layers_model}
    if getattr(args, "patch_size", None) is not None:
        cfg["model"] = {**cfg.get("model", {}), "patch_size": args.patch_size}
    seed = args.seed
    if seed is None:
        seed = loaded.get("seed")
    if seed is None:
        env = os.environ.get(SEED_ENV)
        try:
            seed = int(env) if env is not None else 0
        except ValueError as e:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from e
    cfg["seed"] = int(seed)
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


# -- subcommands ---------------------------------------------------------------

def cmd_preprocess(cfg: dict) -> int:
    _require(cfg, "input", "output")
    rec = ingest.read_recording(cfg["input"])
    segments, report = ingest.preprocess_with_report(rec, cfg["highpass_hz"])
    out = Path(cfg["output"])
    written = []
    for seg in segments:
        p = ingest.write_segment(out / f"segment_{seg.provenance['segment_index']:05d}", seg)
        written.append(str(p))
    report["written"] = written
    log.info("kept %d of %d segments", report["segments_kept"], report["segments_total"])
    _atomic_write_text(out / "summary.json", json.dumps(report, indent=2, sort_keys=True))
    _emit(report)
    return 0


def _load_segments(data_dir: str) -> list:
    root = Path(data_dir)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise DataError(f"no segment containers under {root}")
    return [ingest.read_segment(d) for d in dirs]


def cmd_pretrain(cfg: dict) -> int:
    from . import pretrain

    _require(cfg, "output")
    try:
        model_cfg = ModelConfig.from_dict({"dropout": 0.0, **cfg["model"]})
    except TypeError as e:
        raise UsageError(str(e)) from e
    seed = cfg["seed"]
    if cfg["synthetic"]:
        corpus = pretrain.synthetic_corpus(cfg["n_segments"] + cfg["n_test"], seed,
                                           n_channels=cfg["n_channels"])
        train, test = corpus[:cfg["n_segments"]], corpus[cfg["n_segments"]:]
    elif cfg["data"]:
        corpus = _load_segments(cfg["data"])
        n_test = min(cfg["n_test"], len(corpus) // 5)
        train, test = corpus[:len(corpus) - n_test], corpus[len(corpus) - n_test:]
    else:
        raise UsageError("pretrain needs --data DIR or --synthetic")
    mup = MuPConfig(base_width=cfg["base_width"] or model_cfg.d_model)
    sched = pretrain.Schedule(lr=cfg["lr"], batch_size=cfg["batch_size"], warmup_frac=cfg["warmup_frac"])
    out = Path(cfg["output"])
    try:
        result = pretrain.train_loop(train, model_cfg, mup, sched, steps=cfg["steps"], seed=seed, test_set=test)
    except pretrain.TrainingDiverged as e:
        _atomic_write_text(out / "trace.csv", pretrain.trace_to_csv(e.trace))
        log.error("%s", e)
        _emit({"status": "diverged", "message": str(e)})
        return 3
    pretrain.save_checkpoint(out / "checkpoint", result.model, result.mup, result.step)
    _atomic_write_text(out / "trace.csv", pretrain.trace_to_csv(result.trace))
    _atomic_write_text(out / "run_config.json", json.dumps(cfg, indent=2, sort_keys=True))
    summary = {"status": "ok", "steps": result.step, "checkpoint": str(out / "checkpoint"),
               "trace": str(out / "trace.csv")}
    if result.trace:
        summary["initial_train_loss"] = result.trace[0].train_loss
        summary["final_train_loss"] = result.trace[-1].train_loss
    _emit(summary)
    return 0


def cmd_verify(cfg: dict) -> int:
    from . import checks

    report = checks.run_suite(seed=cfg["seed"], break_rope=cfg["break_rope"], n_layers=cfg["n_layers"])
    if cfg["output"]:
        _atomic_write_text(Path(cfg["output"]), json.dumps(report, indent=2, sort_keys=True))
    _emit(report)
    if report["failed"]:
        print(f"failed properties: {', '.join(report['failed'])}", file=sys.stderr)
        return 1
    return 0


def cmd_fit(cfg: dict) -> int:
    _require(cfg, "observations", "output")
    path = Path(cfg["observations"])
    try:
        text = path.read_text()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    try:
        obs = scalinglab.read_observations(text)
    except scalinglab.CSVFormatError as e:
        raise DataError(f"{path}: {e}") from e
    law, info = scalinglab.fit_law(obs)
    report = scalinglab.fit_report(law, info)
    _atomic_write_text(Path(cfg["output"]), report)
    _emit(json.loads(report))
    return 0


def _read_law(path: str) -> scalinglab.FittedLaw:
    try:
        d = json.loads(Path(path).read_text())
        return scalinglab.FittedLaw.from_dict(d.get("law", d))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"invalid law file {path}: {e}") from e


def cmd_frontier(cfg: dict) -> int:
    _require(cfg, "output")
    law = _read_law(cfg["law"]) if cfg["law"] else scalinglab.LAW_IEEG_1S
    grid = scalinglab.isoloss_grid(law, float(cfg["unique_tokens"]), cfg["params"], cfg["epochs"],
                                   k=cfg["flops_k"])
    budgets = cfg["budgets"]
    if budgets is None:
        lo, hi = grid.flops.min(), grid.flops.max()
        budgets = np.geomspace(lo / 2, hi, 25).tolist()
    points = scalinglab.compute_frontier(grid, budgets)
    out = Path(cfg["output"])
    _atomic_write_text(out / "contour.csv", scalinglab.contour_csv(grid))
    _atomic_write_text(out / "frontier.csv", scalinglab.frontier_csv(points))
    _emit({"law": law.to_dict(), "n_cells": int(grid.loss.size), "n_budgets": len(points),
           "n_infeasible": sum(not p.feasible for p in points),
           "contour": str(out / "contour.csv"), "frontier": str(out / "frontier.csv")})
    return 0


def cmd_report(cfg: dict) -> int:
    models = scalinglab.PRIOR_MODELS
    if cfg["models"]:
        try:
            rows = json.loads(Path(cfg["models"]).read_text())
            models = tuple((r["model"], float(r["channel_hours"]), float(r["epochs"])) for r in rows)
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"invalid model list {cfg['models']}: {e}") from e
    table = scalinglab.scaled_epochs_table(models, cfg["ref_channel_hours"])
    if cfg["output"]:
        out = Path(cfg["output"])
        _atomic_write_text(out, scalinglab._csv(("model", "channel_hours", "epochs", "scaled_epochs"),
                                                ((r["model"], r["channel_hours"], r["epochs"], r["scaled_epochs"])
                                                 for r in table)))
    _emit({"ref_channel_hours": cfg["ref_channel_hours"], "rows": table})
    return 0


COMMANDS = {"preprocess": cmd_preprocess, "pretrain": cmd_pretrain, "verify": cmd_verify,
            "fit": cmd_fit, "frontier": cmd_frontier, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ephyslab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON settings file (flags override it)")
        s.add_argument("--seed", type=int, help=f"random seed (default: ${SEED_ENV} or 0)")
        s.add_argument("--output", help="output file or directory")
        return s

    s = add("preprocess", "filter, segment and QAQC a raw recording container")
    s.add_argument("--input", help="raw container directory")
    s.add_argument("--highpass-hz", type=float)

    s = add("pretrain", "masked-reconstruction pretraining with checkpoint and loss trace")
    s.add_argument("--data", help="directory of segment containers")
    s.add_argument("--synthetic", action="store_true", help="train on a generated corpus")
    s.add_argument("--n-segments", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--n-channels", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--warmup-frac", type=float)
    s.add_argument("--base-width", type=int, help="muP base width (default: d_model)")
    s.add_argument("--d-model", type=int)
    s.add_argument("--n-layers", dest="n_layers_model", type=int)
    s.add_argument("--patch-size", type=int, choices=(50, 500))

    s = add("verify", "run the numerical property suite")
    s.add_argument("--break-rope", action="store_true", help="debug: mis-rotate RoPE (must fail)")
    s.add_argument("--n-layers", type=int)

    s = add("fit", "fit the data-constrained scaling law to an observations CSV")
    s.add_argument("--observations", help="CSV with params,unique_tokens,epochs,loss")

    s = add("frontier", "IsoLoss contour grid and compute-optimal frontier")
    s.add_argument("--law", help="fit report or law JSON (default: built-in 1 s iEEG law)")
    s.add_argument("--unique-tokens", type=float)
    s.add_argument("--params", type=float, nargs="+")
    s.add_argument("--epochs", type=float, nargs="+")
    s.add_argument("--budgets", type=float, nargs="+")
    s.add_argument("--flops-k", type=float)

    s = add("report", "scaled-epochs table for prior models")
    s.add_argument("--models", help="JSON list of {model, channel_hours, epochs}")
    s.add_argument("--ref-channel-hours", type=float)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ingest.ContainerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
