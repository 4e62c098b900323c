"""Command-line entry point.

    ihaudit train     [--config FILE]
    ihaudit hessian   [--config FILE] [--targets 0 1 ..]
    ihaudit audit     [--config FILE] --attack ID [--target K | --all-targets]
    ihaudit evaluate  [--config FILE] [TABLE.csv ...] [--out DIR]
    ihaudit dynamics verify [--check noise|fluctuation|all] [--out FILE]
    ihaudit run-all   [--config FILE]

Without ``--config`` the bundled synthetic experiment is used. Failures
exit nonzero and print ``{"error": code, "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import config as C
from . import dynamics as Dy
from . import pipeline as P
from .errors import IhaError, IoError
from .fsutil import atomic_write_text
from .training import SgdConfig

EXIT_ERROR = 2

# (momentum, weight decay, Hessian eigenvalues, batch size, thinning)
FLUCTUATION_CASES = (
    (0.0, 0.0, (10.0, 30.0), 256, 2),
    (0.0, 5e-4, (10.0, 30.0), 256, 2),
    (0.9, 0.0, (5.0, 40.0), 1024, 4),
    (0.9, 5e-4, (5.0, 40.0), 1024, 4),
)


def dynamics_reports(check: str = "all", samples: int = 100_000, trials: int = 100_000, seed: int = 0) -> list[dict]:
    """Simulated-vs-predicted reports for minibatch noise and stationary fluctuation."""
    out = []
    if check in ("noise", "all"):
        inst = Dy.quadratic_instance(seed=seed)
        for S in (16, 32):
            r = Dy.verify_noise(inst, S, trials, seed)
            r["pass"] = r["relative_frobenius_error"] <= 0.10
            out.append(r)
    if check in ("fluctuation", "all"):
        for mu, alpha, eig, S, thin in FLUCTUATION_CASES:
            inst = Dy.quadratic_instance(hessian_eigenvalues=eig, seed=seed)
            cfg = SgdConfig(learning_rate=0.05, momentum=mu, weight_decay=alpha, batch_size=S, seed=seed)
            r = Dy.verify_fluctuation(inst, cfg, samples=samples, thin=thin, burn_in=2000)
            r["pass"] = r["max_relative_entry_error"] <= 0.10
            out.append(r)
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ihaudit", description="Membership-inference auditing via inverse-Hessian scores.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON experiment config (default: bundled synthetic experiment)")
        return sp

    with_config(sub.add_parser("train", help="train the models of the membership game"))
    h = with_config(sub.add_parser("hessian", help="precompute and persist Hessian eigendecompositions"))
    h.add_argument("--targets", type=int, nargs="*", help="model indices (default: audit targets)")

    a = with_config(sub.add_parser("audit", help="score candidate records of a target model"))
    a.add_argument("--attack", required=True, help="attack id from the config")
    g = a.add_mutually_exclusive_group(required=True)
    g.add_argument("--target", type=int)
    g.add_argument("--all-targets", action="store_true")

    e = with_config(sub.add_parser("evaluate", help="metrics, ROC and agreement from score tables"))
    e.add_argument("tables", nargs="*", help="score CSVs (default: all under the output directory)")
    e.add_argument("--out", help="directory for metrics files")

    d = sub.add_parser("dynamics", help="SGD dynamics checks on a synthetic quadratic")
    dsub = d.add_subparsers(dest="action", required=True)
    v = dsub.add_parser("verify", help="compare simulated noise and fluctuation with predictions")
    v.add_argument("--check", choices=("noise", "fluctuation", "all"), default="all")
    v.add_argument("--samples", type=int, default=100_000, help="stationary samples per fluctuation case")
    v.add_argument("--trials", type=int, default=100_000, help="minibatches for the noise estimate")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="write the JSON report here as well")

    with_config(sub.add_parser("run-all", help="train, hessian, audit and evaluate in one go"))
    return p


def _run(args) -> object:
    if args.command == "dynamics":
        reports = dynamics_reports(args.check, args.samples, args.trials, args.seed)
        result = {"reports": reports, "pass": all(r["pass"] for r in reports)}
        if args.out:
            atomic_write_text(args.out, json.dumps(result, indent=2, sort_keys=True) + "\n")
        return result

    cfg = C.load(args.config)
    if args.command == "train":
        man = P.cmd_train(cfg)
        return {"output_dir": str(cfg.output_dir), "config_hash": cfg.hash, "retrained": man["retrained"]}
    if args.command == "hessian":
        idx = P.cmd_hessian(cfg, args.targets)
        return {"config_hash": cfg.hash, "models": sorted(int(k) for k in idx["models"])}
    if args.command == "audit":
        cfg.attack(args.attack)
        targets = cfg.targets if args.all_targets else [args.target]
        man = P.load_manifest(cfg)
        return {"tables": [str(P.cmd_audit(cfg, args.attack, k, man)) for k in targets]}
    if args.command == "evaluate":
        metrics = P.cmd_evaluate(cfg, args.tables or None, args.out)
        return {a: {k: v for k, v in m.items() if k != "per_model"} for a, m in metrics["attacks"].items()}
    if args.command == "run-all":
        metrics = P.run_all(cfg)
        return {a: {k: v for k, v in m.items() if k != "per_model"} for a, m in metrics["attacks"].items()}
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        result = _run(args)
    except IhaError as exc:
        err = {"error": exc.code, "message": str(exc)}
        if getattr(exc, "path", None):
            err["path"] = exc.path
        print(json.dumps(err), file=sys.stderr)
        return EXIT_ERROR
    except ValueError as exc:
        print(json.dumps({"error": "invalid_argument", "message": str(exc)}), file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(json.dumps({"error": IoError.code, "message": str(exc)}), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
