"""Fixed-step SGD on the variational parameters and the envelope summary metric.

Random streams are keyed by name so that runs are reproducible and
comparable: for a given global seed and replicate index, every learning
rate and every estimator sees the same initialization and the same noise
``eps`` at each iteration. Objective logging draws from its own stream and
never touches the optimization path.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .estimator_spec import EstimatorSpec
from .estimators import batch_standard
from .models import (
    FamilyKind,
    GaussianVariational,
    TargetModel,
    linear_gaussian_model,
    log_weight_batch,
    logistic_regression_model,
    synthetic_logistic_data,
)
from .rng import stream

__all__ = [
    "ModelSpec",
    "EvalSpec",
    "RunConfig",
    "Trace",
    "default_learning_rates",
    "build_model",
    "initial_params",
    "evaluate_objective",
    "sgd_optimize",
    "run_grid",
    "envelope",
    "median_envelope",
    "average_objective",
    "summarize",
    "write_trace_csv",
]


def default_learning_rates(count: int = 15, low: float = 1e-4, high: float = 1.0) -> list[float]:
    return [float(x) for x in np.logspace(math.log10(low), math.log10(high), count)]


@dataclass(frozen=True)
class ModelSpec:
    """Synthetic target. ``kind`` is ``linear_gaussian`` or ``logistic``.

    Linear-Gaussian: ``A`` is ``(obs_dim, dim)`` with ``N(0, 1)`` entries and
    ``x = A z* + noise_sd * e`` for ``z* ~ N(0, I)``. Logistic: ``num_data``
    rows of ``dim`` features.
    """

    kind: str = "linear_gaussian"
    dim: int = 5
    obs_dim: int = 10
    noise_sd: float = 1.0
    num_data: int = 200
    prior_sd: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear_gaussian", "logistic"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.dim < 1 or self.obs_dim < 1 or self.num_data < 0:
            raise ValueError("model dimensions must be positive")


def build_model(spec: ModelSpec, rng: np.random.Generator) -> TargetModel:
    if spec.kind == "linear_gaussian":
        A = rng.standard_normal((spec.obs_dim, spec.dim))
        x = A @ rng.standard_normal(spec.dim) + spec.noise_sd * rng.standard_normal(spec.obs_dim)
        return linear_gaussian_model(A, spec.noise_sd, x)
    X, y = synthetic_logistic_data(rng, spec.num_data, spec.dim)
    return logistic_regression_model(X, y, spec.prior_sd)


@dataclass(frozen=True)
class EvalSpec:
    """Objective logging: standard estimator on ``n`` fresh draws every ``period`` iterations.

    ``m = None`` uses the training ``m``. ``final_n`` draws are used once at the end.
    """

    n: int = 64
    m: int | None = None
    period: int = 1
    final_n: int = 8192

    def __post_init__(self):
        if self.n < 1 or self.period < 1 or self.final_n < 1:
            raise ValueError("eval sizes and period must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    family: FamilyKind
    estimator: EstimatorSpec
    n: int
    learning_rates: tuple[float, ...] = tuple(default_learning_rates())
    iterations: int = 2000
    seeds: tuple[int, ...] = tuple(range(10))
    eval: EvalSpec = EvalSpec()

    def __post_init__(self):
        object.__setattr__(self, "family", FamilyKind(self.family))
        lrs = tuple(float(x) for x in self.learning_rates)
        if not lrs or any(not (x > 0 and math.isfinite(x)) for x in lrs):
            raise ValueError("learning rates must be positive and finite")
        if len(set(lrs)) != len(lrs):
            raise ValueError("learning rates must be distinct")
        object.__setattr__(self, "learning_rates", lrs)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.n % self.estimator.m or self.n < self.estimator.m:
            raise ValueError(f"m={self.estimator.m} must divide n={self.n}")
        if self.eval.n % self.eval_m:
            raise ValueError(f"eval m={self.eval_m} must divide eval n={self.eval.n}")
        if self.eval.final_n % self.eval_m:
            raise ValueError(f"eval m={self.eval_m} must divide final eval n={self.eval.final_n}")

    @property
    def eval_m(self) -> int:
        return self.eval.m if self.eval.m is not None else self.estimator.m


@dataclass
class Trace:
    """Logged objective per evaluation point; truncated at the first non-finite value.

    ``final_logw_std`` is the spread of the log-weights in the final
    evaluation batch; it is zero exactly when ``q`` matches the posterior.
    """

    iterations: np.ndarray
    objective: np.ndarray
    params: np.ndarray
    diverged: bool = False
    diverged_at: int | None = None
    final_objective: float = float("nan")
    final_logw_std: float = float("nan")
    checkpoints: dict[int, np.ndarray] = field(default_factory=dict)


def initial_params(config: RunConfig, seed: int, replicate: int) -> GaussianVariational:
    return GaussianVariational.init(config.family, config.model.dim, stream(seed, "init", replicate))


def evaluate_objective(
    model: TargetModel, params: GaussianVariational, n: int, m: int, rng: np.random.Generator
) -> float:
    """Standard IW-ELBO estimate from ``n`` fresh draws."""
    batch = log_weight_batch(model, params, rng.standard_normal((n, params.dim)))
    return float(batch_standard(batch.v[None, :], m)[0])


def sgd_optimize(
    config: RunConfig,
    lr: float,
    seed: int,
    replicate: int = 0,
    model: TargetModel | None = None,
    checkpoints=(),
) -> Trace:
    """Ascent ``phi <- phi + lr * g`` for ``config.iterations`` steps.

    ``lr = 0`` is allowed here (it keeps the parameters fixed).
    ``checkpoints`` lists iterations after which the parameters are stored.
    """
    if not (lr >= 0 and math.isfinite(lr)):
        raise ValueError("lr must be non-negative and finite")
    if model is None:
        model = build_model(config.model, stream(seed, "data"))
    params = initial_params(config, seed, replicate)
    eps_rng = stream(seed, "eps", replicate)
    # the estimator's own randomness and the logging draws are per cell,
    # keyed by the rate itself so a cell does not depend on the rest of the grid
    cell = repr(float(lr))
    set_rng = stream(seed, "sets", replicate, cell)
    eval_rng = stream(seed, "eval", replicate, cell)
    spec, n, period, m_eval = config.estimator, config.n, config.eval.period, config.eval_m
    want = {int(c) for c in checkpoints}
    its, obj, stored = [], [], {}
    diverged_at = None
    phi = params.phi.copy()
    with np.errstate(all="ignore"):
        for t in range(1, config.iterations + 1):
            try:
                batch = log_weight_batch(model, params, eps_rng.standard_normal((n, params.dim)))
                g = spec.gradient(batch, set_rng)
                phi = phi + lr * g
                if not np.all(np.isfinite(phi)):
                    raise FloatingPointError("non-finite parameter")
                params = params.with_params(phi)
                if t % period == 0:
                    value = evaluate_objective(model, params, config.eval.n, m_eval, eval_rng)
                    if not math.isfinite(value):
                        raise FloatingPointError("non-finite objective")
                    its.append(t)
                    obj.append(value)
            except (FloatingPointError, ValueError, np.linalg.LinAlgError):
                diverged_at = t
                break
            if t in want:
                stored[t] = phi.copy()
        final = spread = float("nan")
        if diverged_at is None:
            rng = stream(seed, "final", replicate, cell)
            try:
                v = log_weight_batch(model, params, rng.standard_normal((config.eval.final_n, params.dim))).v
                final, spread = float(batch_standard(v[None, :], m_eval)[0]), float(np.std(v))
            except FloatingPointError:
                pass
    return Trace(
        np.asarray(its, dtype=np.int64),
        np.asarray(obj, dtype=np.float64),
        params.phi.copy(),
        diverged_at is not None,
        diverged_at,
        final,
        spread,
        stored,
    )


def run_grid(config: RunConfig, seed: int, threads: int = 1) -> dict[tuple[int, int], Trace]:
    """Every ``(lr index, replicate)`` cell; the result does not depend on ``threads``."""
    model = build_model(config.model, stream(seed, "data"))
    cells = [(i, r) for r in config.seeds for i in range(len(config.learning_rates))]

    def run(cell):
        i, r = cell
        return sgd_optimize(config, config.learning_rates[i], seed, r, model)

    if threads <= 1:
        results = [run(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, cells))
    return dict(zip(cells, results))


# ---------------------------------------------------------------------------
# summary metric


def envelope(traces, length: int | None = None) -> np.ndarray:
    """Pointwise maximum over traces; truncated (diverged) traces are padded with ``-inf``."""
    arrs = [np.asarray(t.objective if isinstance(t, Trace) else t, dtype=np.float64) for t in traces]
    if not arrs:
        raise ValueError("envelope of no traces")
    L = length if length is not None else max(a.size for a in arrs)
    out = np.full((len(arrs), L), -np.inf)
    for i, a in enumerate(arrs):
        if a.size > L:
            raise ValueError("trace longer than requested length")
        out[i, : a.size] = a
    return out.max(axis=0)


def median_envelope(envelopes) -> np.ndarray:
    """Pointwise median across seeds; lower median for an even count."""
    E = np.asarray([np.asarray(e, dtype=np.float64) for e in envelopes])
    if E.size == 0 or E.ndim != 2:
        raise ValueError("need at least one envelope of equal length")
    return np.sort(E, axis=0)[(E.shape[0] - 1) // 2]


def average_objective(env, burn_in: int = 50, horizon: int | None = None) -> float:
    """Mean of entries ``burn_in+1 .. horizon`` (1-based) of a median envelope."""
    env = np.asarray(env, dtype=np.float64)
    if horizon is None:
        horizon = env.size
    if horizon <= burn_in or burn_in < 0:
        raise ValueError("need 0 <= burn_in < horizon")
    if horizon > env.size:
        raise ValueError(f"horizon {horizon} exceeds trace length {env.size}")
    return float(np.mean(env[burn_in:horizon]))


def summarize(
    config: RunConfig, traces: dict[tuple[int, int], Trace], burn_in: int = 50, horizon: int | None = None
) -> dict:
    length = config.iterations // config.eval.period
    envs = [
        envelope([traces[(i, r)] for i in range(len(config.learning_rates))], length)
        for r in config.seeds
    ]
    med = median_envelope(envs)
    avg = average_objective(med, burn_in, horizon)
    finals = [t.final_objective for t in traces.values() if math.isfinite(t.final_objective)]
    return {
        "average_objective": avg if math.isfinite(avg) else None,
        "best_final_objective": max(finals) if finals else None,
        "diverged_cells": sum(t.diverged for t in traces.values()),
        "cells": len(traces),
        "median_envelope": med,
    }


def _fmt(x) -> str:
    return repr(float(x))


def write_trace_csv(path: str, trace: Trace) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iter", "objective"])
        for t, v in zip(trace.iterations, trace.objective):
            w.writerow([int(t), _fmt(v)])


def trace_filename(model: str, estimator: str, lr: float, seed: int) -> str:
    return f"trace_{model}_{estimator}_{lr!r}_{seed}.csv"


def dump_json(obj, path: str) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(type(o))

    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, default=default, allow_nan=False)
        f.write("\n")


def with_estimator(config: RunConfig, estimator: EstimatorSpec) -> RunConfig:
    return replace(config, estimator=estimator)
