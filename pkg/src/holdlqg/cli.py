"""Batch entry point: config ingestion, synthesis, simulation, validation.

Exit codes: 0 success; 2 validation failure (bad config, dimension
mismatch, unknown baseline); 3 synthesis failure (indefinite stage
Hessian); 4 oracle deviation beyond tolerance; 5 enumeration budget
exceeded.  All outputs are deterministic for identical inputs and seeds.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .delay_model import DelayPmf
from .errors import (
    EnumerationBudgetError,
    HoldLqgError,
    SynthesisError,
    ValidationError,
)
from .gain_synth import GainSchedule, SystemModel, riccati_reference, synthesize
from .netsim import BASELINE_NAMES, make_policy, monte_carlo, run_episode, write_results_csv
from .oracle import compare_gains, optimal_policy_dp, stationarity_certificate

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SYNTHESIS = 3
EXIT_DEVIATION = 4
EXIT_BUDGET = 5


def _matrix(raw, rows: int, cols: int, name: str) -> np.ndarray:
    """Accept a row-major flat list or nested rows; enforce the shape."""
    arr = np.asarray(raw, dtype=float)
    if arr.ndim == 1:
        if arr.size != rows * cols:
            raise ValidationError(f"{name} must have {rows * cols} entries, got {arr.size}")
        arr = arr.reshape(rows, cols)
    if arr.shape != (rows, cols):
        raise ValidationError(f"{name} must be {rows}x{cols}, got {arr.shape}")
    return arr


class ExperimentConfig:
    """Parsed and validated experiment description."""

    def __init__(self, obj: dict):
        try:
            mobj = obj["model"]
            n = int(mobj["n"])
            m = int(mobj["m"])
            N = int(obj["horizon"])
            self.model = SystemModel(
                A=_matrix(mobj["A"], n, n, "A"),
                B=_matrix(mobj["B"], n, m, "B"),
                Q=_matrix(mobj["Q"], n, n, "Q"),
                R=_matrix(mobj["R"], m, m, "R"),
                S_terminal=_matrix(mobj["S_terminal"], n, n, "S_terminal"),
                N=N,
            )
            self.pmf = DelayPmf(obj["pmf"]["probs"])
        except KeyError as exc:
            raise ValidationError(f"config is missing required field {exc}") from None
        if "seed" in obj:
            self.seed = int(obj["seed"])
        elif "seeds" in obj:
            seeds = obj["seeds"]
            self.seed = int(seeds[0] if isinstance(seeds, (list, tuple)) else seeds)
        else:
            self.seed = 0
        self.trials = int(obj.get("trials", 1000))
        if self.trials < 1:
            raise ValidationError("trials must be >= 1")
        if obj.get("x0") is not None:
            x0 = np.asarray(obj["x0"], dtype=float).reshape(-1)
            if x0.size != self.model.n:
                raise ValidationError(f"x0 must have {self.model.n} entries, got {x0.size}")
            self.x0 = x0
        else:
            self.x0 = np.ones(self.model.n)
        if obj.get("noise_cov") is not None:
            cov = _matrix(obj["noise_cov"], self.model.n, self.model.n, "noise_cov")
            try:
                np.linalg.cholesky(cov + 1e-300 * np.eye(self.model.n))
            except np.linalg.LinAlgError:
                raise ValidationError("noise_cov must be positive semidefinite") from None
            self.noise_cov = cov
        else:
            self.noise_cov = None
        baselines = obj.get("baselines", [])
        for b in baselines:
            if b not in BASELINE_NAMES:
                raise ValidationError(
                    f"unknown baseline {b!r}; choose from {sorted(BASELINE_NAMES)}"
                )
        self.baselines = list(baselines)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from None
        return cls(obj)


def _load_schedule(path) -> GainSchedule:
    try:
        return GainSchedule.load(path)
    except FileNotFoundError:
        raise ValidationError(f"gain schedule file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"gain schedule is not valid JSON: {exc}") from None


def cmd_synthesize(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    schedule = synthesize(cfg.model, cfg.pmf)
    schedule.save(args.out)
    flagged = [st.t for st in schedule.stages if st.flag != "pd"]
    note = f" (pseudo-inverse stages: {flagged})" if flagged else ""
    print(f"wrote gain schedule for horizon N={cfg.model.N} to {args.out}{note}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    schedule = _load_schedule(args.gains)
    if (schedule.n, schedule.m, schedule.horizon) != (cfg.model.n, cfg.model.m, cfg.model.N):
        raise ValidationError(
            f"schedule dims (n={schedule.n}, m={schedule.m}, N={schedule.horizon}) do not "
            f"match config (n={cfg.model.n}, m={cfg.model.m}, N={cfg.model.N})"
        )
    trials = args.trials if args.trials is not None else cfg.trials
    seed = args.seed if args.seed is not None else cfg.seed
    names = list(dict.fromkeys(cfg.baselines + (args.baseline or [])))
    for b in names:
        if b not in BASELINE_NAMES:
            raise ValidationError(f"unknown baseline {b!r}; choose from {sorted(BASELINE_NAMES)}")
    policies = {"optimal": make_policy("optimal", cfg.model, schedule)}
    for b in names:
        policies[b] = make_policy(b, cfg.model)
    results = monte_carlo(
        cfg.model, cfg.pmf, policies, trials=trials, seed=seed, x0=cfg.x0,
        noise_cov=cfg.noise_cov,
    )
    write_results_csv(args.out, results)
    if args.trace:
        trace = run_episode(
            cfg.model, cfg.pmf, policies["optimal"], cfg.x0, seed=seed, trial=0,
            noise_cov=cfg.noise_cov,
        )
        trace.to_csv(args.trace)
    for name, st in results.items():
        print(
            f"{name}: mean={st.mean_cost:.6g} std={st.std:.6g} "
            f"ci99=[{st.ci99_lo:.6g}, {st.ci99_hi:.6g}] trials={st.trials}"
        )
    print(f"wrote results to {args.out}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.gains:
        schedule = _load_schedule(args.gains)
        if (schedule.n, schedule.m, schedule.horizon) != (cfg.model.n, cfg.model.m, cfg.model.N):
            raise ValidationError("schedule dims do not match config")
    else:
        schedule = synthesize(cfg.model, cfg.pmf)
    result = optimal_policy_dp(cfg.model, cfg.pmf, budget=args.budget)
    comparison = compare_gains(schedule, result)
    certificate = stationarity_certificate(cfg.model, cfg.pmf, schedule, budget=args.budget)
    report = {
        "max_deviation": comparison.max_deviation,
        "stationarity_certificate": certificate,
        "tolerance": args.tol,
        "certificate_tolerance": args.cert_tol,
        "n_information_states": result.n_atoms,
        "n_realizations": result.n_realizations,
        "comparison": comparison.to_json_obj(),
    }
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=1)
            fh.write("\n")
    print(comparison.text())
    print(f"stationarity certificate = {certificate:.3e}")
    ok = comparison.max_deviation <= args.tol and certificate <= args.cert_tol
    print("oracle check PASSED" if ok else "oracle check FAILED")
    return EXIT_OK if ok else EXIT_DEVIATION


def cmd_validate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    # Structural self-test: with a zero-delay channel the synthesized
    # schedule must collapse to the classical Riccati feedback.
    model = cfg.model
    schedule = synthesize(model, DelayPmf.zero_delay())
    ric = riccati_reference(model)
    worst = 0.0
    for t, tau, row in schedule.iter_rows():
        ctrl = row[:, : row.shape[1] - model.n]
        if ctrl.any():
            raise ValidationError(
                f"zero-delay reduction failed: nonzero control block at (t={t}, tau={tau})"
            )
        worst = max(worst, float(np.abs(row[:, row.shape[1] - model.n :] + ric.gains[t]).max()))
    if worst > 1e-9:
        raise ValidationError(f"zero-delay reduction failed: gain deviation {worst:.3e} > 1e-9")
    print(f"config valid; zero-delay reduction deviation {worst:.3e}")
    return EXIT_OK


def cmd_export(args) -> int:
    schedule = _load_schedule(args.gains)
    schedule.save(args.out)
    print(f"re-emitted validated gain schedule to {args.out}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="holdlqg",
        description="Finite-horizon LQG over a delay/loss channel: synthesis, simulation, validation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="compute the gain schedule for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("simulate", help="Monte Carlo evaluation of the schedule and baselines")
    p.add_argument("--config", required=True)
    p.add_argument("--gains", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trace", default=None, help="also write a single-episode trace CSV")
    p.add_argument(
        "--baseline", action="append", choices=list(BASELINE_NAMES),
        help="additional baseline policy (repeatable)",
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle-check", help="certify the synthesis against exact enumeration")
    p.add_argument("--config", required=True)
    p.add_argument("--gains", default=None, help="check this schedule instead of synthesizing")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--cert-tol", type=float, default=1e-8)
    p.add_argument("--budget", type=int, default=1_000_000)
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("validate", help="validate a config and run the zero-delay self-test")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("export", help="validate and canonically re-emit a gain schedule")
    p.add_argument("--gains", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SynthesisError as exc:
        print(f"synthesis failure: {exc}", file=sys.stderr)
        return EXIT_SYNTHESIS
    except EnumerationBudgetError as exc:
        print(f"enumeration budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except HoldLqgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    raise SystemExit(main())
