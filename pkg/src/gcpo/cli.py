"""Command-line entry point: ``gcpo train | scm-verify | compare | gradcheck``.

Exit codes: 0 success, 1 bad input (config, SCM file, missing file),
2 training aborted on a non-finite loss or gradient, 3 a check or compare
arm failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, rng, scm
from .config import ConfigError, load_config
from .trainer import TrainingAborted, train

EXIT_OK, EXIT_INPUT, EXIT_ABORT, EXIT_FAILED = 0, 1, 2, 3

log = logging.getLogger("gcpo")


def _threads() -> None:
    raw = os.environ.get("GCPO_THREADS")
    if raw:
        try:
            torch.set_num_threads(max(1, int(raw)))
        except ValueError:
            log.warning("ignoring non-integer GCPO_THREADS=%r", raw)


def _err(msg: str) -> None:
    print(f"gcpo: error: {msg}", file=sys.stderr)


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config, algorithm=args.algorithm, seed=args.seed, steps=args.steps)
    except FileNotFoundError:
        _err(f"config file not found: {args.config}")
        return EXIT_INPUT
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_INPUT
    try:
        result = train(cfg, args.out)
    except TrainingAborted as exc:
        _err(f"{exc}; diagnostic dump in {Path(args.out) / 'reports'}")
        return EXIT_ABORT
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_INPUT
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"steps": len(result.metrics), "final_mean_reward": last.get("mean_reward"),
                      "final_pass_at_1": last.get("pass_at_1"), "out": str(args.out)}))
    return EXIT_OK


def cmd_scm_verify(args) -> int:
    reports = []
    try:
        if args.path:
            table = scm.build_joint(scm.load_scm(args.path))
            reports.append(dict(source=str(args.path), **scm.verify_suite(table, np.random.default_rng(args.seed))))
        else:
            for k in range(args.random):
                g = np.random.default_rng(rng.derive_seed(args.seed, "scm", k) & 0xFFFFFFFF)
                model = scm.random_scm(g, args.n, args.query_card, args.response_card)
                reports.append(dict(source=f"random:{args.seed}:{k}", **scm.verify_suite(scm.build_joint(model), g)))
    except FileNotFoundError:
        _err(f"SCM file not found: {args.path}")
        return EXIT_INPUT
    except (scm.SCMError, scm.BudgetError) as exc:
        _err(f"invalid SCM: {exc}")
        return EXIT_INPUT
    passed = all(r["passed"] for r in reports)
    summary = {"passed": passed, "count": len(reports), "reports": reports}
    text = json.dumps(summary, indent=2, sort_keys=True, default=float)
    if args.out:
        _dump(Path(args.out) / "reports" / "scm_verify.json", summary)
    print(text)
    return EXIT_OK if passed else EXIT_FAILED


def _arm_row(config_path: str, seed: int, out: Path) -> dict:
    row = {"config": config_path, "seed": seed}
    try:
        cfg = load_config(config_path, seed=seed)
        res = train(cfg, out)
    except TrainingAborted as exc:
        return dict(row, status="failed", error=str(exc))
    except (ConfigError, FileNotFoundError, RuntimeError, ValueError) as exc:
        return dict(row, status="failed", error=str(exc))
    last = res.metrics[-1] if res.metrics else {}
    return dict(row, status="ok", algorithm=cfg.algorithm, pass_at_1=last.get("pass_at_1"),
                mean_reward=last.get("mean_reward"), eval_mean_reward=last.get("eval_mean_reward"))


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return sum(xs) / len(xs) if xs else None


def format_table(arms: dict) -> str:
    lines = [f"{'arm':<6} {'seed':>6} {'status':<7} {'pass@1':>8} {'reward':>8}"]
    for name, rows in arms.items():
        for r in rows:
            p = "-" if r.get("pass_at_1") is None else f"{r['pass_at_1']:.4f}"
            m = "-" if r.get("mean_reward") is None else f"{r['mean_reward']:.4f}"
            lines.append(f"{name:<6} {r['seed']:>6} {r['status']:<7} {p:>8} {m:>8}")
        ok = [r for r in rows if r["status"] == "ok"]
        mp, mr = _mean(r["pass_at_1"] for r in ok), _mean(r["mean_reward"] for r in ok)
        lines.append(f"{name:<6} {'mean':>6} {'':<7} {'-' if mp is None else f'{mp:.4f}':>8} "
                     f"{'-' if mr is None else f'{mr:.4f}':>8}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    out = Path(args.out)
    arms = {}
    for name, path in (("a", args.config_a), ("b", args.config_b)):
        arms[name] = [_arm_row(path, s, out / f"arm_{name}" / f"seed_{s}") for s in args.seeds]
    table = format_table(arms)
    report = {"created": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "artifact_version": __version__,
              "seeds": args.seeds, "arms": arms}
    _dump(out / "reports" / "compare.json", report)
    (out / "reports" / "compare.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    failed = any(r["status"] != "ok" for rows in arms.values() for r in rows)
    return EXIT_FAILED if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradchecks

    results = [r.to_dict() for r in run_gradchecks(args.seed, args.coords, args.tol)]
    if args.out:
        _dump(Path(args.out) / "reports" / "gradcheck.json", results)
    print(json.dumps(results, indent=2))
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcpo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy from a config file")
    t.add_argument("config")
    t.add_argument("--algorithm", choices=("grpo", "gcpo"))
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("scm-verify", help="exact checks on a finite SCM")
    s.add_argument("path", nargs="?")
    s.add_argument("--random", type=int, default=0, metavar="K")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=3)
    s.add_argument("--query-card", type=int, default=2)
    s.add_argument("--response-card", type=int, default=2)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_scm_verify)

    c = sub.add_parser("compare", help="run two configs over a seed list")
    c.add_argument("config_a")
    c.add_argument("config_b")
    c.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compare)

    g = sub.add_parser("gradcheck", help="finite-difference check of both objectives")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--coords", type=int, default=24)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _threads()
    if args.command == "scm-verify" and not args.path and args.random < 1:
        _err("scm-verify needs an SCM file or --random K")
        return EXIT_INPUT
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
