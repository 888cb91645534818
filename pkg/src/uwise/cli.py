"""Command-line entry point: ``uwise {variance,approx-audit,optimize,zeta}``.

Every subcommand reads a strict JSON config (unknown keys are rejected),
needs ``--seed`` and writes its outputs under ``--out``. Exit status is 0
when every check passes, 1 when a check fails and 2 for usage or config
errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import analysis as an
from .estimator_spec import EstimatorSpec
from .estimators import approx_first_order, approx_second_order, complete_u
from .harness import (
    EvalSpec,
    ModelSpec,
    RunConfig,
    build_model,
    default_learning_rates,
    dump_json,
    run_grid,
    sgd_optimize,
    summarize,
    trace_filename,
    write_trace_csv,
)
from .models import GaussianVariational, log_weight_batch
from .rng import stream
from .subsets import DEFAULT_CAP, CapExceededError, all_subsets, disjoint_blocks, permuted_blocks, random_subsets

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SamplerConfig(_Strict):
    kind: Literal["lognormal", "constant"] = "lognormal"
    sigma: float = Field(1.0, gt=0)
    value: float = 0.0

    def build(self) -> an.Sampler:
        if self.kind == "constant":
            return an.constant_sampler(self.value)
        return an.lognormal_sampler(self.sigma)


class ModelConfig(_Strict):
    kind: Literal["linear_gaussian", "logistic"] = "linear_gaussian"
    dim: int = Field(5, ge=1)
    obs_dim: int = Field(10, ge=1)
    noise_sd: float = Field(1.0, gt=0)
    num_data: int = Field(200, ge=0)
    prior_sd: float = Field(1.0, gt=0)

    def spec(self) -> ModelSpec:
        return ModelSpec(**self.model_dump())


class TrajectoryConfig(_Strict):
    """SGD run whose stored parameters are the checkpoints of an audit."""

    model: ModelConfig = ModelConfig()
    family: Literal["diagonal", "full_rank"] = "diagonal"
    estimator: Literal["standard", "complete", "permuted", "random", "approx1", "approx2"] = "complete"
    base: Literal["reparam", "dreg"] = "reparam"
    n: int = Field(16, ge=1)
    m: int = Field(8, ge=1)
    ell: int = Field(20, ge=1)
    lr: float = Field(1e-3, gt=0)
    iterations: int = Field(1000, ge=1)
    checkpoints: list[int] = [200, 400, 600, 800, 1000]
    replicate: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if any(c < 1 or c > self.iterations for c in self.checkpoints):
            raise ValueError("checkpoints must lie in 1..iterations")
        return self

    def run(self, seed: int):
        spec = EstimatorSpec(self.estimator, self.m, ell=self.ell, base=self.base)
        cfg = RunConfig(
            self.model.spec(), self.family, spec, self.n, (self.lr,), self.iterations, (self.replicate,),
            EvalSpec(n=self.n, m=self.m, period=self.iterations, final_n=self.n),
        )
        model = build_model(cfg.model, stream(seed, "data"))
        trace = sgd_optimize(cfg, self.lr, seed, self.replicate, model, checkpoints=self.checkpoints)
        return cfg, model, trace


class GradientVarianceConfig(_Strict):
    trajectory: TrajectoryConfig = TrajectoryConfig(model=ModelConfig(kind="logistic", dim=10))
    base: Literal["reparam", "dreg"] = "reparam"
    R: int = Field(2000, ge=3)
    include_approx: bool = False


class VarianceConfig(_Strict):
    sampler: SamplerConfig = SamplerConfig()
    n: int = Field(16, ge=1)
    m: int = Field(8, ge=1)
    ell: int = Field(20, ge=1)
    R: int = Field(200_000, ge=3)
    cap: int = Field(DEFAULT_CAP, ge=1)
    checks: list[Literal["ordering", "hoeffding", "gradient", "unbiased"]] = ["ordering", "hoeffding"]
    gradient: GradientVarianceConfig = GradientVarianceConfig()

    @model_validator(mode="after")
    def _check(self):
        if self.m > self.n or self.n % self.m:
            raise ValueError(f"m={self.m} must divide n={self.n}")
        return self


class AuditConfig(_Strict):
    sweep_cases: int = Field(10_000, ge=0)
    sweep_max_n: int = Field(12, ge=2, le=20)
    trajectory: TrajectoryConfig | None = TrajectoryConfig(
        family="full_rank", estimator="permuted", base="dreg", lr=0.02, iterations=2000,
        checkpoints=[1, 10, 100, 500, 1000, 1500, 2000],
    )
    batches_per_checkpoint: int = Field(50, ge=1)
    final_gap_tolerance: float | None = Field(None, gt=0)


class EstimatorChoice(_Strict):
    kind: Literal["standard", "complete", "permuted", "random", "approx1", "approx2"]
    ell: int = Field(20, ge=1)
    k: int | None = Field(None, ge=1)


class EvalConfig(_Strict):
    n: int = Field(64, ge=1)
    m: int | None = Field(None, ge=1)
    period: int = Field(1, ge=1)
    final_n: int = Field(8192, ge=1)


class OptimizeConfig(_Strict):
    model: ModelConfig = ModelConfig()
    family: Literal["diagonal", "full_rank"] = "full_rank"
    base: Literal["reparam", "dreg"] = "reparam"
    n: int = Field(16, ge=1)
    ms: list[int] = [8]
    estimators: list[EstimatorChoice] = [
        EstimatorChoice(kind="standard"),
        EstimatorChoice(kind="permuted"),
        EstimatorChoice(kind="approx2"),
    ]
    learning_rates: list[float] | None = None
    iterations: int = Field(2000, ge=1)
    seeds: int = Field(10, ge=1)
    eval: EvalConfig = EvalConfig()
    burn_in: int = Field(50, ge=0)
    horizon: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if any(m < 1 or self.n % m for m in self.ms):
            raise ValueError(f"every m in {self.ms} must divide n={self.n}")
        length = self.iterations // self.eval.period
        if (self.horizon or length) > length or (self.horizon or length) <= self.burn_in:
            raise ValueError("need burn_in < horizon <= number of logged iterations")
        return self


class ZetaConfig(_Strict):
    sampler: SamplerConfig = SamplerConfig()
    m: int = Field(8, ge=1)
    R: int = Field(100_000, ge=3)


# ---------------------------------------------------------------------------
# helpers


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _clean(obj):
    """JSON-safe copy: non-finite floats become ``null``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _report_checks(checks, out=sys.stdout) -> bool:
    for c in checks:
        print(c.line(), file=out)
    return all(c.passed for c in checks)


def _threads(value: str) -> int:
    if value == "auto":
        return os.cpu_count() or 1
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("threads must be a positive integer or 'auto'") from None
    if k < 1:
        raise argparse.ArgumentTypeError("threads must be a positive integer or 'auto'")
    return k


def _seed(value: str) -> int:
    try:
        s = int(value, 0)
    except ValueError:
        raise argparse.ArgumentTypeError("seed must be an integer") from None
    if not 0 <= s < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return s


# ---------------------------------------------------------------------------
# subcommands


def cmd_variance(cfg: VarianceConfig, seed: int, out: str, threads: int, dump_sets: bool) -> int:
    sampler = cfg.sampler.build()
    reports = {}
    checks = []
    if "ordering" in cfg.checks:
        rep = an.check_ordering_and_fraction(sampler, cfg.n, cfg.m, cfg.ell, cfg.R, stream(seed, "ordering"), cfg.cap)
        reports["ordering"] = rep
    if "hoeffding" in cfg.checks:
        if math.comb(cfg.n, cfg.m) > cfg.cap:
            print(f"hoeffding: complete skipped (cap): {CapExceededError(cfg.n, cfg.m, math.comb(cfg.n, cfg.m), cfg.cap)}")
        else:
            reports["hoeffding"] = an.check_hoeffding(sampler, cfg.n, cfg.m, cfg.R, stream(seed, "hoeffding"))
    if "gradient" in cfg.checks:
        g = cfg.gradient
        tcfg, model, trace = g.trajectory.run(seed)
        fam = tcfg.family
        for t in g.trajectory.checkpoints:
            if t not in trace.checkpoints:
                print(f"gradient: trajectory diverged before checkpoint {t}")
                continue
            params = GaussianVariational(fam, tcfg.model.dim, trace.checkpoints[t])
            reports[f"gradient@{t}"] = an.gradient_variance_report(
                model, params, cfg.n, cfg.m, cfg.ell, g.R, stream(seed, "gradient", t), g.base, cfg.cap, g.include_approx
            )
    unbiased = []
    if "unbiased" in cfg.checks:
        unbiased = an.check_unbiasedness(sampler, cfg.n, cfg.m, cfg.ell, cfg.R, stream(seed, "unbiased"), cfg.cap)
    for name, rep in reports.items():
        print(f"[{name}]")
        for note in rep.notes:
            print(f"  note: {note}")
        _report_checks(rep.checks)
        checks += rep.checks
        for key, val in rep.derived.items():
            if key.startswith(("ratio[", "fraction")):
                print(f"  {key} = {val:.6g}")
    if unbiased:
        print("[unbiased]")
        _report_checks(unbiased)
        checks += unbiased
    os.makedirs(out, exist_ok=True)
    doc = {name: rep.to_dict(seed) for name, rep in reports.items()}
    if unbiased:
        doc["unbiased"] = [c.to_dict() for c in unbiased]
    doc["passed"] = all(c.passed for c in checks)
    with open(os.path.join(out, "variance_report.json"), "w", encoding="utf-8") as f:
        json.dump(_clean(doc), f, indent=2)
        f.write("\n")
    rows = []
    for name, rep in reports.items():
        for r in rep.csv_rows(seed):
            rows.append([f"{name}:{r['estimator']}", r["n"], r["m"], r["ell_or_k"], r["variance"], r["std_error"], r["R"], r["seed"]])
    _write_csv(os.path.join(out, "variance_report.csv"), ["estimator", "n", "m", "ell_or_k", "variance", "std_error", "R", "seed"], rows)
    if dump_sets:
        _dump_sets(cfg, seed, out)
    return EXIT_OK if doc["passed"] else EXIT_FAIL


def _dump_sets(cfg: VarianceConfig, seed: int, out: str) -> None:
    """One realization of each index-set collection, 1-based."""
    rng = stream(seed, "dump-sets")
    collections = {
        "standard": disjoint_blocks(cfg.n, cfg.m),
        "permuted": permuted_blocks(cfg.n, cfg.m, cfg.ell, rng),
        "random": random_subsets(cfg.n, cfg.m, cfg.ell * (cfg.n // cfg.m), rng),
    }
    try:
        collections["complete"] = all_subsets(cfg.n, cfg.m, cfg.cap)
    except CapExceededError as e:
        print(f"dump-sets: complete skipped (cap): {e}")
    for name, S in collections.items():
        with open(os.path.join(out, f"sets_{name}.json"), "w", encoding="utf-8") as f:
            f.write(S.to_json())
            f.write("\n")


def cmd_approx_audit(cfg: AuditConfig, seed: int, out: str, threads: int, dump_sets: bool) -> int:
    os.makedirs(out, exist_ok=True)
    checks = []
    ex = an.worked_example()
    print("[worked example]")
    _report_checks(ex["checks"])
    checks += ex["checks"]
    _write_csv(
        os.path.join(out, "worked_example.csv"),
        ["i", "j", "kernel"],
        [(i, j, k) for (i, j), k in zip(ex["pairs"], ex["kernels"])],
    )
    sweep = an.bound_chain_sweep(stream(seed, "sweep"), cfg.sweep_cases, cfg.sweep_max_n)
    nviol = len(sweep["violations"])
    c = an.Check("bound-chain violations", float(nviol), 0.0, 0.0)
    print("[bound chain]")
    _report_checks([c])
    checks.append(c)
    doc = {"worked_example": {"kernels": ex["kernels"], "complete_u": ex["complete_u"]}, "sweep": sweep}
    if cfg.trajectory is not None:
        tcfg, model, trace = cfg.trajectory.run(seed)
        rng = stream(seed, "audit")
        m = cfg.trajectory.m
        rows = []
        for t in cfg.trajectory.checkpoints:
            if t not in trace.checkpoints:
                print(f"trajectory diverged before checkpoint {t}")
                break
            params = GaussianVariational(tcfg.family, tcfg.model.dim, trace.checkpoints[t])
            g1, g2 = [], []
            for _ in range(cfg.batches_per_checkpoint):
                v = log_weight_batch(model, params, rng.standard_normal((cfg.trajectory.n, params.dim))).v
                u = complete_u(v, m).value
                g1.append(u - approx_first_order(v, m).value)
                g2.append(u - approx_second_order(v, m).value if m >= 2 else float("nan"))
            rows.append((t, float(np.mean(g1)), float(np.mean(g2)), math.log(m)))
        print("[trajectory]  iter  U-A1  U-A2  ln m")
        for r in rows:
            print(f"  {r[0]:6d}  {r[1]:.6g}  {r[2]:.6g}  {r[3]:.6g}")
        _write_csv(os.path.join(out, "approx_trajectory.csv"), ["iter", "gap_first_order", "gap_second_order", "log_m"], rows)
        doc["trajectory"] = [dict(zip(["iter", "gap_first_order", "gap_second_order", "log_m"], r)) for r in rows]
        if cfg.final_gap_tolerance is not None and rows:
            c = an.Check("final U-A1 == ln m", rows[-1][1], math.log(m), cfg.final_gap_tolerance, True)
            _report_checks([c])
            checks.append(c)
    doc["checks"] = [c.to_dict() for c in checks]
    doc["passed"] = all(c.passed for c in checks)
    with open(os.path.join(out, "approx_audit.json"), "w", encoding="utf-8") as f:
        json.dump(_clean(doc), f, indent=2)
        f.write("\n")
    return EXIT_OK if doc["passed"] else EXIT_FAIL


def cmd_optimize(cfg: OptimizeConfig, seed: int, out: str, threads: int, dump_sets: bool) -> int:
    os.makedirs(out, exist_ok=True)
    lrs = tuple(cfg.learning_rates) if cfg.learning_rates is not None else tuple(default_learning_rates())
    ev = cfg.eval
    avg: dict[str, dict[str, float | None]] = {}
    cells = []
    for m in cfg.ms:
        for choice in cfg.estimators:
            if choice.kind == "approx2" and m < 2:
                continue
            base = cfg.base if not choice.kind.startswith("approx") else "reparam"
            spec = EstimatorSpec(choice.kind, m, ell=choice.ell, k=choice.k, base=base)
            run_cfg = RunConfig(
                cfg.model.spec(), cfg.family, spec, cfg.n, lrs, cfg.iterations, tuple(range(cfg.seeds)),
                EvalSpec(ev.n, ev.m, ev.period, ev.final_n),
            )
            traces = run_grid(run_cfg, seed, threads)
            label = f"{spec.label}-m{m}"
            for (i, r), tr in sorted(traces.items()):
                write_trace_csv(os.path.join(out, trace_filename(cfg.model.kind, label, lrs[i], r)), tr)
                cells.append({
                    "estimator": spec.label, "m": m, "lr": lrs[i], "seed": r, "diverged": tr.diverged,
                    "final_objective": tr.final_objective,
                })
            s = summarize(run_cfg, traces, cfg.burn_in, cfg.horizon)
            avg.setdefault(spec.label, {})[str(m)] = s["average_objective"]
    diffs = {}
    for other in [k for k in avg if k != "standard"]:
        if "standard" not in avg:
            break
        row = {}
        for m, ref in avg["standard"].items():
            val = avg[other].get(m)
            row[m] = None if val is None or ref is None else val - ref
        diffs[f"{other} - standard"] = row
    summary = {"average_objective": avg, "differences": diffs, "learning_rates": list(lrs), "cells": cells}
    dump_json(_clean(summary), os.path.join(out, "summary.json"))
    header = "".join(f"{'m=' + m:>12}" for m in map(str, cfg.ms))
    print(f"{'average objective difference':<32}{header}")
    for name, row in diffs.items():
        vals = "".join(f"{('nan' if row.get(str(m)) is None else format(row[str(m)], '.4f')):>12}" for m in cfg.ms)
        print(f"{name:<32}{vals}")
    return EXIT_OK


def cmd_zeta(cfg: ZetaConfig, seed: int, out: str, threads: int, dump_sets: bool) -> int:
    os.makedirs(out, exist_ok=True)
    sampler = cfg.sampler.build()
    rows = [an.estimate_zeta(sampler, cfg.m, c, cfg.R, stream(seed, "zeta", c)) for c in range(cfg.m + 1)]
    _write_csv(os.path.join(out, "zeta.csv"), ["c", "zeta", "std_error", "R"], [(z.c, z.value, z.std_error, z.R) for z in rows])
    z1, zm = rows[1], rows[cfg.m]
    tiny = 1e-12 * max(abs(zm.value), 1e-300)
    check = an.Check(
        "m zeta_1 <= zeta_m", cfg.m * z1.value, zm.value, an.BAND * math.hypot(cfg.m * z1.std_error, zm.std_error) + tiny
    )
    print("   c  zeta_c  std_error")
    for z in rows:
        print(f"{z.c:4d}  {z.value:.6g}  {z.std_error:.3g}")
    _report_checks([check])
    doc = {
        "m": cfg.m,
        "R": cfg.R,
        "seed": seed,
        "zeta": [{"c": z.c, "value": z.value, "std_error": z.std_error} for z in rows],
        "monotone_in_c": bool(all(a.value <= b.value for a, b in zip(rows, rows[1:]))),
        "checks": [check.to_dict()],
        "passed": check.passed,
    }
    with open(os.path.join(out, "zeta.json"), "w", encoding="utf-8") as f:
        json.dump(_clean(doc), f, indent=2)
        f.write("\n")
    return EXIT_OK if check.passed else EXIT_FAIL


COMMANDS = {
    "variance": (VarianceConfig, cmd_variance, "variance ordering, Hoeffding bounds and gradient variance"),
    "approx-audit": (AuditConfig, cmd_approx_audit, "worked example, bound-chain sweep and approximation gap"),
    "optimize": (OptimizeConfig, cmd_optimize, "SGD grid over learning rates and seeds"),
    "zeta": (ZetaConfig, cmd_zeta, "covariance of kernels on overlapping batches"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uwise", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (defaults are used when omitted)")
        p.add_argument("--seed", type=_seed, required=True, help="unsigned 64-bit seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=_threads, default=1, help="worker count or 'auto'")
        p.add_argument("--dump-sets", action="store_true", help="write one realization of each index-set collection")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    schema, fn, _ = COMMANDS[args.command]
    try:
        raw = {}
        if args.config:
            with open(args.config, encoding="utf-8") as f:
                raw = json.load(f)
        cfg = schema.model_validate(raw)
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        print(f"uwise {args.command}: invalid config: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return fn(cfg, args.seed, args.out, args.threads, args.dump_sets)
    except CapExceededError as e:
        print(f"uwise {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"uwise {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
