"""Operator command line: dataset generation, training, evaluation,
ablation batches, gradient checks, combination-rule self-tests, and
loss-weight sweeps.

Every command writes ``<command>_result.json`` into its output directory:
``{"command", "timestamp", "elapsed_s", "result"}``.  The ``result``
payload is deterministic for a fixed config and seed — wall-clock fields
never leak into it.

Exit codes: 0 ok, 2 usage/config error, 3 missing or unreadable input,
4 a declared check failed, 5 training diverged.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import VARIANTS, ConfigError, RunConfig, preset, variant_config
from .evaluate import (
    build_index,
    evaluate_model,
    export_similarity_matrix,
    gallery_for_split,
    score_against_index,
    write_report,
)
from .evidence import oracle_selftest
from .fastpath import compose_np
from .train import (
    DivergenceError,
    ablate,
    ablate_table,
    gradcheck_model,
    load_checkpoint,
    sweep,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_CHECK_FAILED = 4
EXIT_DIVERGED = 5


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip() != ""]


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip() != ""]


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    """Assemble the run config: preset < config file < flags; seed falls
    back to RETRACK_SEED, then 0."""
    values: dict = {}
    if getattr(args, "preset", None):
        values = preset(args.preset).to_dict()
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        values.update(loaded)
    if "seed" not in values:
        env = os.environ.get("RETRACK_SEED")
        if env is not None:
            try:
                values["seed"] = int(env)
            except ValueError:
                raise ConfigError(f"RETRACK_SEED must be an integer, got {env!r}") from None
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    for name in ("steps", "batch"):
        override = getattr(args, name, None)
        if override is not None:
            values[name] = override
    return RunConfig.from_dict(values)


def _write_result(out_dir: str | Path, command: str, result: dict, started: float) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "elapsed_s": round(time.monotonic() - started, 3),
        "result": result,
    }
    path = out / f"{command}_result.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = _resolve_config(args)
    out_target = args.out or cfg.data_dir
    if not out_target:
        raise ConfigError("gen needs a dataset directory: pass --out or set data_dir in the config")
    ds = data_mod.generate(cfg)
    out = data_mod.save(ds, out_target)
    result = {
        "data_dir": str(out),
        "seed": cfg.seed,
        "counts": {name: ds.splits[name].count for name in ("train", "val", "test")},
        "shape": [cfg.q, cfg.d],
    }
    print(f"wrote dataset to {out} "
          f"(train={result['counts']['train']}, val={result['counts']['val']}, "
          f"test={result['counts']['test']})")
    _write_result(out, "gen", result, started)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = _resolve_config(args)
    out_dir = args.out or cfg.out_dir or "run_out"
    ds = data_mod.load(args.data) if args.data else None
    variant = getattr(args, "variant", None)
    if variant:
        cfg = variant_config(cfg, variant)
    result_run = train(cfg, ds=ds, out_dir=out_dir, resume_from=args.resume,
                       log_every=args.log_every)
    rec = result_run.report.recall_at_k
    print(f"finished {result_run.steps_run} steps; "
          f"test R@1={rec[1]:.4f} R@5={rec[5]:.4f} R@10={rec[10]:.4f}")
    result = {
        "out_dir": str(result_run.out_dir),
        "steps": cfg.steps,
        "metrics_csv": str(result_run.metrics_path),
        "ckpt_final": str(result_run.ckpt_final),
        "ckpt_best": str(result_run.ckpt_best) if result_run.ckpt_best else None,
        "best_val_R1": result_run.best_val_r1,
        "test_report": result_run.report.to_dict(),
    }
    _write_result(out_dir, "train", result, started)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.monotonic()
    params, _, step, cfg, _ = load_checkpoint(args.ckpt)
    data_src = args.data or cfg.data_dir
    if data_src:
        ds = data_mod.load(data_src)
        if ds.config != data_mod.data_config(cfg):
            raise ConfigError(
                f"dataset at {data_src} was generated under a different "
                "data config than the checkpoint"
            )
    else:
        ds = data_mod.generate(cfg)
    params_np = {k: t.data for k, t in params.items()}
    report = evaluate_model(params_np, ds, cfg, split=args.split)
    out = Path(args.out or cfg.out_dir or "eval_out")
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "recall.json")
    if args.export_sims:
        sp = ds.splits[args.split]
        f_c = compose_np(params_np, sp.f_r.astype(np.float64),
                         sp.f_m.astype(np.float64), cfg)
        feats, ids, target_ids = gallery_for_split(ds, args.split)
        scores = score_against_index(f_c, build_index(feats, ids), cfg)
        export_similarity_matrix(scores, target_ids, ids, args.export_sims)
    rec = report.recall_at_k
    print(f"checkpoint step {step}, split {args.split}: "
          f"R@1={rec[1]:.4f} R@5={rec[5]:.4f} R@10={rec[10]:.4f}")
    _write_result(out, "eval", report.to_dict(), started)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = _resolve_config(args)
    for name in args.variants:
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choices: {', '.join(VARIANTS)}")
    out = args.out or cfg.out_dir or "ablate_out"
    report = ablate(cfg, args.variants, args.seeds, out_dir=out, steps=args.steps)
    print(ablate_table(report))
    _write_result(out, "ablate", report, started)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = _resolve_config(args)
    seeds = [args.seed] if args.seed is not None else args.seeds
    worst: dict[str, float] = {}
    for seed in seeds:
        errs = gradcheck_model(cfg, seed, h=args.h, batch=args.batch)
        for label, err in errs.items():
            worst[label] = max(worst.get(label, 0.0), float(err))
    overall = max(worst.values())
    passed = bool(overall < args.tol)
    for label in sorted(worst):
        print(f"{label}: max rel. error {worst[label]:.3e}")
    print(f"overall {overall:.3e} {'<' if passed else '>='} tol {args.tol:g}")
    result = {
        "seeds": list(seeds),
        "h": args.h,
        "tol": args.tol,
        "max_rel_error": worst,
        "overall": overall,
        "passed": passed,
    }
    _write_result(args.out or cfg.out_dir or ".", "gradcheck", result, started)
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_dst_oracle(args: argparse.Namespace) -> int:
    started = time.monotonic()
    result = oracle_selftest(seed=args.seed, cases=args.cases)
    print(f"{result['cases']} random combinations: "
          f"max deviation {result['max_deviation']:.3e} "
          f"({'ok' if result['passed'] else 'FAILED'})")
    _write_result(args.out, "dst-oracle", result, started)
    return EXIT_OK if result["passed"] else EXIT_CHECK_FAILED


def cmd_sweep(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = _resolve_config(args)
    out = args.out or cfg.out_dir or "sweep_out"
    report = sweep(cfg, kappas=args.kappa, lams=args.lam,
                   steps=args.steps, out_dir=out)
    for row in report["rows"]:
        print(f"kappa={row['kappa']:g} lam={row['lam']:g}: "
              f"R@1={row['R1']:.4f} R@5={row['R5']:.4f} R@10={row['R10']:.4f}")
    _write_result(out, "sweep", report, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file with flat RunConfig keys")
    p.add_argument("--preset", choices=("desk", "paper"),
                   help="named baseline config the file/flags override")
    p.add_argument("--seed", type=int, default=None,
                   help="run seed (falls back to config, then RETRACK_SEED, then 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retrack",
        description="Composed-retrieval calibration pipeline on synthetic benchmarks.",
    )
    sub = parser.add_subparsers(dest="cmd")

    p = sub.add_parser("gen", help="generate a synthetic triplet dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset directory (generated in memory if omitted)")
    p.add_argument("--out", default="run_out", help="run output directory")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--variant", help="named ablation variant to apply")
    p.add_argument("--steps", type=int, default=None, help="override step count")
    p.add_argument("--batch", type=int, default=None, help="override batch size")
    p.add_argument("--log-every", type=int, default=0, help="print losses every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", help="dataset directory (regenerated from the "
                                  "checkpoint config if omitted)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", default="eval_out", help="report output directory")
    p.add_argument("--export-sims", help="also write the full similarity matrix CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train ablation variants across seeds")
    _add_config_flags(p)
    p.add_argument("--variants", type=lambda s: s.split(","),
                   default=["full", "wo_SCD", "wo_Ldir", "wo_Levi", "wo_Ldis"],
                   help="comma-separated variant names")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2],
                   help="comma-separated seeds")
    p.add_argument("--steps", type=int, default=None, help="override step count per run")
    p.add_argument("--out", default="ablate_out", help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    _add_config_flags(p)
    p.add_argument("--seeds", type=_int_list, default=list(range(10)),
                   help="comma-separated seeds (default 0..9)")
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error allowed")
    p.add_argument("--batch", type=int, default=2, help="probe batch size")
    p.add_argument("--out", default=".", help="result directory")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dst-oracle", help="combination-rule self-test against "
                                          "brute-force enumeration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=200, help="random mass-function cases")
    p.add_argument("--out", default=".", help="result directory")
    p.set_defaults(func=cmd_dst_oracle)

    p = sub.add_parser("sweep", help="grid scan over loss weights")
    _add_config_flags(p)
    p.add_argument("--kappa", type=_float_list, default=None,
                   help="comma-separated kappa values")
    p.add_argument("--lam", type=_float_list, default=None,
                   help="comma-separated lambda values")
    p.add_argument("--steps", type=int, default=None, help="override step count per run")
    p.add_argument("--out", default="sweep_out", help="output directory")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "cmd", None) is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except data_mod.DataFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
