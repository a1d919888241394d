"""Tree-structured Parzen estimator search with a median-rule pruner."""

from __future__ import annotations

import csv
import enum
import inspect
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Union

import numpy as np
from scipy.special import ndtr, ndtri


class HpoError(Exception):
    pass


# ---------------------------------------------------------------- search space


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise HpoError(f"empty range [{self.lo}, {self.hi}]")

    def to_internal(self, v):
        return v

    def from_internal(self, u):
        return float(min(max(u, self.lo), self.hi))

    @property
    def bounds(self) -> tuple[float, float]:
        return self.lo, self.hi


@dataclass(frozen=True)
class LogUniform(Uniform):
    def __post_init__(self):
        super().__post_init__()
        if self.lo <= 0:
            raise HpoError("log range must be strictly positive")

    def to_internal(self, v):
        return np.log(v)

    def from_internal(self, u):
        return float(min(max(math.exp(u), self.lo), self.hi))

    @property
    def bounds(self) -> tuple[float, float]:
        return math.log(self.lo), math.log(self.hi)


@dataclass(frozen=True)
class IntRange(Uniform):
    """Integers lo..hi inclusive, modelled continuously on [lo - 0.5, hi + 0.5]."""

    def from_internal(self, u):
        return int(min(max(round(u), self.lo), self.hi))

    @property
    def bounds(self) -> tuple[float, float]:
        return self.lo - 0.5, self.hi + 0.5


Distribution = Union[Uniform, LogUniform, IntRange]
SearchSpace = Mapping[str, Distribution]


def contains(space: SearchSpace, params: Mapping[str, float]) -> bool:
    for name, d in space.items():
        v = params[name]
        if not d.lo <= v <= d.hi:
            return False
        if isinstance(d, IntRange) and v != int(v):
            return False
    return True


# ----------------------------------------------------------------------- trials


class TrialState(enum.Enum):
    RUNNING = "running"
    COMPLETE = "complete"
    PRUNED = "pruned"
    FAILED = "failed"


@dataclass
class Trial:
    id: int
    params: dict
    intermediate_values: list[tuple[int, float]] = field(default_factory=list)
    state: TrialState = TrialState.RUNNING
    value: float | None = None

    def value_at(self, step: int) -> float | None:
        for s, v in self.intermediate_values:
            if s == step:
                return v
        return None


@dataclass(frozen=True)
class TpeConfig:
    gamma: float = 0.25
    n_startup: int = 10
    n_ei_candidates: int = 24


@dataclass(frozen=True)
class PrunerConfig:
    n_warmup_steps: int = 5
    enabled: bool = True


# ---------------------------------------------------------------------- sampler


class _Parzen:
    """Gaussian kernels on the observations plus one wide prior kernel, truncated to bounds."""

    def __init__(self, obs: np.ndarray, lo: float, hi: float):
        width = hi - lo
        n = len(obs)
        if n > 1 and obs.std(ddof=1) > 0:
            bw = obs.std(ddof=1) * n ** (-1.0 / 5.0)  # Scott's rule in one dimension
        else:
            bw = width / 10.0
        # floor keeps the sampler exploring once observations cluster
        bw = min(max(bw, width / min(100.0, n + 1.0)), width)
        self.mu = np.append(obs, 0.5 * (lo + hi))
        self.sigma = np.append(np.full(n, bw), width)
        self.weights = np.full(n + 1, 1.0 / (n + 1))
        self.lo, self.hi = lo, hi
        a = (lo - self.mu) / self.sigma
        b = (hi - self.mu) / self.sigma
        self._cdf_lo, self._cdf_hi = ndtr(a), ndtr(b)
        self._mass = np.maximum(self._cdf_hi - self._cdf_lo, 1e-300)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        k = rng.choice(len(self.mu), size=size, p=self.weights)
        u = self._cdf_lo[k] + rng.random(size) * self._mass[k]
        z = ndtri(np.clip(u, 1e-300, 1 - 1e-16))
        return np.clip(self.mu[k] + self.sigma[k] * z, self.lo, self.hi)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        z = (x[:, None] - self.mu[None, :]) / self.sigma[None, :]
        comp = -0.5 * z**2 - np.log(self.sigma * math.sqrt(2 * math.pi) * self._mass)
        comp = comp + np.log(self.weights)
        top = comp.max(axis=1, keepdims=True)
        return (top + np.log(np.exp(comp - top).sum(axis=1, keepdims=True)))[:, 0]


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> dict:
    out = {}
    for name, d in space.items():
        lo, hi = d.bounds
        out[name] = d.from_internal(rng.uniform(lo, hi))
    return out


def suggest(
    history: Iterable[Trial], space: SearchSpace, seed: int, config: TpeConfig = TpeConfig()
) -> dict:
    """Propose the next parameter point.

    Below ``n_startup`` completed trials this is a uniform draw. After that,
    completed trials are split at the ``gamma`` loss quantile and each
    parameter gets a Parzen density for the good and the bad group;
    ``n_ei_candidates`` draws from the good density are ranked by
    log l(x) - log g(x) and the best one wins.
    """
    if not space:
        raise HpoError("search space is empty")
    rng = np.random.default_rng(seed)
    done = [t for t in history if t.state is TrialState.COMPLETE]
    if len(done) < config.n_startup:
        return sample_uniform(space, rng)

    done.sort(key=lambda t: (t.value, t.id))
    n_good = max(1, math.ceil(config.gamma * len(done)))
    good, bad = done[:n_good], done[n_good:]
    score = np.zeros(config.n_ei_candidates)
    cands = {}
    for name, d in space.items():
        lo, hi = d.bounds
        l_obs = np.array([d.to_internal(t.params[name]) for t in good], dtype=float)
        g_obs = np.array([d.to_internal(t.params[name]) for t in bad], dtype=float)
        l_kde, g_kde = _Parzen(l_obs, lo, hi), _Parzen(g_obs, lo, hi)
        x = l_kde.sample(rng, config.n_ei_candidates)
        cands[name] = x
        score += l_kde.log_pdf(x) - g_kde.log_pdf(x)
    best = int(np.argmax(score))
    return {name: space[name].from_internal(cands[name][best]) for name in space}


# ----------------------------------------------------------------------- pruner


def should_prune(
    trial: Trial, history: Iterable[Trial], step: int, config: PrunerConfig = PrunerConfig()
) -> bool:
    """Median rule: prune when strictly worse than the median of earlier trials at ``step``."""
    if not config.enabled or step < config.n_warmup_steps:
        return False
    value = trial.value_at(step)
    if value is None:
        raise HpoError(f"trial {trial.id} has no value at step {step}")
    others = [
        v
        for t in history
        if t.id != trial.id and t.state in (TrialState.COMPLETE, TrialState.PRUNED)
        for v in [t.value_at(step)]
        if v is not None
    ]
    if not others:
        return False
    return value > float(np.median(others))


# --------------------------------------------------------------------- optimize


@dataclass
class Study:
    space: SearchSpace
    seed: int
    tpe: TpeConfig = field(default_factory=TpeConfig)
    pruner: PrunerConfig = field(default_factory=PrunerConfig)
    sampler: str = "tpe"
    trials: list[Trial] = field(default_factory=list)

    def best_trial(self) -> Trial:
        done = [t for t in self.trials if t.state is TrialState.COMPLETE]
        if not done:
            raise HpoError("no completed trials")
        return min(done, key=lambda t: (t.value, t.id))

    def _suggest(self, trial_id: int) -> dict:
        seed = int(np.random.SeedSequence([self.seed, trial_id]).generate_state(1)[0])
        if self.sampler == "random":
            return sample_uniform(self.space, np.random.default_rng(seed))
        return suggest(self.trials, self.space, seed, self.tpe)

    def run_trial(self, objective: Callable) -> Trial:
        trial = Trial(len(self.trials), self._suggest(len(self.trials)))
        self.trials.append(trial)
        out = objective(trial.params)
        if inspect.isgenerator(out):
            intermediate, final = out, None
        else:
            intermediate, final = out
            intermediate = iter(intermediate)
        step = 0
        while True:
            try:
                v = next(intermediate)
            except StopIteration as stop:
                if final is None:
                    final = stop.value
                break
            trial.intermediate_values.append((step, float(v)))
            if should_prune(trial, self.trials, step, self.pruner):
                trial.state = TrialState.PRUNED
                if inspect.isgenerator(intermediate):
                    intermediate.close()
                return trial
            step += 1
        if final is None or not math.isfinite(final):
            trial.state = TrialState.FAILED
            return trial
        trial.value = float(final)
        trial.state = TrialState.COMPLETE
        return trial

    def write_log(self, path: str | Path) -> None:
        """Study log: one row per trial with params flattened as name=value pairs."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial_id", "params", "state", "final_loss"])
            for t in self.trials:
                params = ";".join(f"{k}={t.params[k]!r}" for k in sorted(t.params))
                w.writerow([t.id, params, t.state.value, "" if t.value is None else repr(t.value)])


def optimize(
    objective: Callable,
    space: SearchSpace,
    n_trials: int,
    seed: int,
    *,
    tpe: TpeConfig = TpeConfig(),
    pruner: PrunerConfig = PrunerConfig(),
    sampler: str = "tpe",
    log_path: str | Path | None = None,
) -> Trial:
    """Run ``n_trials`` suggest/evaluate/prune rounds and return the best completed trial.

    ``objective(params)`` either returns ``(intermediate_losses, final_loss)``
    or is a generator yielding intermediate losses and returning the final
    loss; the generator form lets the pruner stop work early.

    Raises:
        HpoError: every trial was pruned or failed.
    """
    return run_study(
        objective, space, n_trials, seed, tpe=tpe, pruner=pruner, sampler=sampler, log_path=log_path
    ).best_trial()


def run_study(
    objective: Callable,
    space: SearchSpace,
    n_trials: int,
    seed: int,
    *,
    tpe: TpeConfig = TpeConfig(),
    pruner: PrunerConfig = PrunerConfig(),
    sampler: str = "tpe",
    log_path: str | Path | None = None,
) -> Study:
    """Like ``optimize`` but returns the whole study."""
    if n_trials < 1:
        raise HpoError("n_trials must be >= 1")
    if sampler not in ("tpe", "random"):
        raise HpoError(f"unknown sampler {sampler!r}")
    study = Study(space, seed, tpe, pruner, sampler)
    for _ in range(n_trials):
        study.run_trial(objective)
    if log_path is not None:
        study.write_log(log_path)
    return study


# ------------------------------------------------------------------ gbdt tuning

DEFAULT_GBDT_SPACE: dict[str, Distribution] = {
    "num_trees": IntRange(20, 200),
    "max_depth": IntRange(2, 6),
    "learning_rate": LogUniform(0.01, 0.5),
    "min_samples_leaf": IntRange(5, 100),
}
REPORT_EVERY = 10


def gbdt_objective(dataset, seed: int = 0, val_fraction: float = 0.2, base_params=None):
    """Objective yielding validation log-loss every ten boosting rounds.

    The last ``val_fraction`` of a seeded permutation is held out.
    """
    from .gbdt import GbdtParams, boost, log_loss

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    n_val = max(1, int(round(val_fraction * len(dataset))))
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    train_set, val_set = dataset.subset(tr_idx), dataset.subset(val_idx)
    base = base_params or GbdtParams()
    y_val = val_set.labels.astype(float)

    def objective(params):
        merged = {**base.__dict__, **params}
        p = GbdtParams(**merged)
        loss = math.inf
        for i, model in enumerate(boost(train_set, p, seed), start=1):
            if i % REPORT_EVERY == 0 or i == p.num_trees:
                loss = log_loss(y_val, model.raw_scores(val_set.features))
                if i % REPORT_EVERY == 0:
                    yield loss
        return loss

    return objective
