"""Benchmark harness: policy pools, target/behavior rotation, MSE sweeps.

The protocol rotates a pool of trained policies: experiment i evaluates
policy p_i (its ground truth estimated from its own on-policy roll-outs)
using the next M policies of the pool as behavior policies.  Squared errors
are aggregated per method across rotations, the first half of which is
tagged validation and the second half test.

Pools (world, trained policies, logged datasets, ground truths) are cached
on disk keyed by a hash of the generating configuration, so M- and T-sweeps
reuse identical data.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimators, mixture, recsim
from .core import BehaviorDataset, StepArrays, Step, Trajectory, half_split
from .direct_method import fit_recsim_dm, recsim_qv
from .estimators import DiscountConfig, Family, prepare_table

ALL_METHODS = (
    "is", "wis", "swis", "dr", "wdr", "swdr",
    "nmis", "nmwis", "nmdr", "nmwdr",
    "mis", "mwis", "mdr", "mwdr",
    "abmdr", "abmwdr",
)
VANILLA_METHODS = {"is", "wis", "swis", "dr", "wdr", "swdr"}
DR_METHODS = {"dr", "wdr", "swdr", "nmdr", "nmwdr", "mdr", "mwdr", "abmdr", "abmwdr"}
T_METHODS = ("mis", "mwis", "mdr", "mwdr", "abmdr", "abmwdr")

DEFAULT_T_MIX = {"mis": 4, "mwis": 4, "mdr": 5, "mwdr": 5, "abmdr": 4, "abmwdr": 4}


class ConfigError(ValueError):
    """The experiment configuration is malformed."""


@dataclass
class ExperimentConfig:
    """Everything the benchmark pipeline needs, TOML-loadable.

    See README for the schema; every constant of the experiment protocol
    (clip threshold 2000, 20 model-recursion sweeps, the 1..10 mixing-horizon
    grid) appears here explicitly.
    """

    # world
    world_seed: int = 7
    num_topics: int = 20
    num_docs: int = 100
    num_users: int = 5
    # policy pool: the recipe tuples are cycled, so a pool of size
    # 2 * len(episode_budgets) holds one near-twin of every policy (a later
    # checkpoint of the same training run, twin_extra_episodes further on)
    # exactly half the pool away.  Every rotation window at M = pool_size/2
    # then contains a low-variance behavior close to its target next to
    # genuinely distant ones, which is the spread the mixture weights feed on.
    pool_size: int = 10
    pool_seed: int = 100
    episode_budgets: tuple[int, ...] = (0, 2200, 150, 3200, 500)
    init_scales: tuple[float, ...] = (3.0, 1.0, 3.6, 0.8, 2.6)
    temperatures: tuple[float, ...] = (0.40, 0.50, 0.35, 0.60, 0.45)
    twin_extra_episodes: int = 15
    train_lr: float = 0.7
    # logged data
    n_per_policy: int = 10_000
    truth_n: int = 100_000
    max_len: int = 20
    # estimation
    gamma: float = 0.9
    clip: float | None = 2000.0
    dm_train_size: int = 10_000
    dm_iters: int = 20
    dm_lambda: float = 1.0
    dm_logistic_lambda: float = 1e-3
    eps: float = 1e-8
    split_seed: int = 17
    # protocol
    rotations: int = 10
    methods: tuple[str, ...] = ALL_METHODS
    m_values: tuple[int, ...] = (1, 2, 3, 4, 5)
    t_values: tuple[int, ...] = tuple(range(1, 11))
    eval_m: int = 5
    t_mix: dict = field(default_factory=lambda: dict(DEFAULT_T_MIX))
    # output
    cache: bool = True

    def __post_init__(self):
        unknown = set(self.methods) - set(ALL_METHODS)
        if unknown:
            raise ConfigError(f"unknown methods: {sorted(unknown)}")
        if max(self.m_values, default=0) >= self.pool_size:
            raise ConfigError("every M must be smaller than the pool size")
        if self.rotations > self.pool_size:
            raise ConfigError("rotations cannot exceed the pool size")
        if self.eval_m >= self.pool_size:
            raise ConfigError("eval_m must be smaller than the pool size")

    def pool_key(self) -> str:
        fields = (
            self.world_seed, self.num_topics, self.num_docs, self.num_users,
            self.pool_size, self.pool_seed, tuple(self.episode_budgets),
            tuple(self.init_scales), self.train_lr, tuple(self.temperatures),
            self.twin_extra_episodes, self.n_per_policy, self.truth_n,
            self.max_len, self.gamma,
        )
        return hashlib.sha256(repr(fields).encode()).hexdigest()[:16]


_TOML_SECTIONS = {
    "world": ("world_seed", "num_topics", "num_docs", "num_users"),
    "pool": (
        "pool_size", "pool_seed", "episode_budgets", "init_scales", "train_lr",
        "temperatures", "twin_extra_episodes",
    ),
    "data": ("n_per_policy", "truth_n", "max_len"),
    "estimation": (
        "gamma", "clip", "dm_train_size", "dm_iters", "dm_lambda",
        "dm_logistic_lambda", "eps", "split_seed",
    ),
    "protocol": ("rotations", "methods", "m_values", "t_values", "eval_m", "t_mix"),
    "output": ("cache",),
}


def load_config(path) -> ExperimentConfig:
    """Parse a TOML experiment file; unknown keys are configuration errors."""
    if sys.version_info >= (3, 11):
        import tomllib
    else:  # pragma: no cover
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    kwargs = {}
    for section, keys in _TOML_SECTIONS.items():
        body = raw.pop(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section [{section}] must be a table")
        for key, value in body.items():
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            if isinstance(value, list):
                value = tuple(value)
            if key == "clip" and value == 0:
                value = None
            kwargs[key] = value
    if raw:
        raise ConfigError(f"unknown top-level sections: {sorted(raw)}")
    return ExperimentConfig(**kwargs)


# ---------------------------------------------------------------------------
# Pool construction and caching
# ---------------------------------------------------------------------------


@dataclass
class PolicyPool:
    world: recsim.TopicWorld
    policies: list[recsim.LinearPolicy]
    datasets: list[BehaviorDataset]
    truths: list[tuple[float, float]]  # (value, standard error) per policy


def _dataset_from_arrays(
    world: recsim.TopicWorld, policy_id: str, lengths, actions, rewards, probs, obs_ids
) -> BehaviorDataset:
    grid = recsim._obs_grid(world)
    trajectories = tuple(
        Trajectory(
            tuple(
                Step(
                    obs=grid[obs_ids[j, t]],
                    action=int(actions[j, t]),
                    reward=float(rewards[j, t]),
                    behavior_prob=float(probs[j, t]),
                )
                for t in range(int(lengths[j]))
            )
        )
        for j in range(len(lengths))
    )
    arrays = StepArrays(
        lengths=lengths, actions=actions, rewards=rewards,
        behavior_probs=probs, obs_ids=obs_ids, unique_obs=tuple(grid),
    )
    return BehaviorDataset(policy_id, trajectories, arrays=arrays)


def build_pool(cfg: ExperimentConfig, cache_dir: Path | str | None = None) -> PolicyPool:
    """Train the policy pool and collect its logged data, reusing any cache
    whose configuration hash matches."""
    key = cfg.pool_key()
    cache = Path(cache_dir) / f"pool_{key}" if (cache_dir and cfg.cache) else None
    if cache is not None and (cache / "manifest.json").exists():
        return _load_pool(cache)

    world = recsim.generate_world(
        cfg.world_seed, cfg.num_topics, cfg.num_docs, cfg.num_users
    )
    policies, datasets, truths = [], [], []
    cycle = len(cfg.episode_budgets)
    for k in range(cfg.pool_size):
        recipe = k % cycle
        seed_recipe = cfg.pool_seed * 1_000_003 + recipe
        policy = recsim.initial_policy(
            world,
            seed_recipe,
            temperature=cfg.temperatures[recipe % len(cfg.temperatures)],
            scale=cfg.init_scales[recipe % len(cfg.init_scales)],
        )
        # replicate index: the same training run continued a little further,
        # so policy k and policy k + cycle are adjacent checkpoints
        budget = cfg.episode_budgets[recipe] + (k // cycle) * cfg.twin_extra_episodes
        if budget:
            policy = recsim.reinforce_train(
                policy, world, episodes=budget, lr=cfg.train_lr,
                seed=seed_recipe + 1, gamma=cfg.gamma, max_len=cfg.max_len,
            )
        policies.append(policy)
        seed_k = cfg.pool_seed * 1_000_003 + 7919 + 101 * k  # distinct data streams
        datasets.append(
            recsim.collect(
                policy, world, cfg.n_per_policy, cfg.max_len,
                seed=seed_k + 2, policy_id=f"p{k}",
            )
        )
        returns = recsim.rollout_returns(
            policy, world, cfg.truth_n, cfg.max_len, seed=seed_k + 3, gamma=cfg.gamma
        )
        truths.append(
            (float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(cfg.truth_n)))
        )
    pool = PolicyPool(world, policies, datasets, truths)
    if cache is not None:
        _save_pool(pool, cache, key)
    return pool


def _save_pool(pool: PolicyPool, cache: Path, key: str) -> None:
    cache.mkdir(parents=True, exist_ok=True)
    recsim.save_world(pool.world, cache / "world.json")
    for k, (policy, ds) in enumerate(zip(pool.policies, pool.datasets)):
        recsim.save_policy(policy, cache / f"policy_{k:02d}.json")
        arrays = ds.step_arrays()
        np.savez_compressed(
            cache / f"data_{k:02d}.npz",
            lengths=arrays.lengths,
            actions=arrays.actions,
            rewards=arrays.rewards,
            behavior_probs=arrays.behavior_probs,
            obs_ids=arrays.obs_ids,
        )
    with open(cache / "truths.json", "w", encoding="utf-8") as fh:
        json.dump(pool.truths, fh)
    with open(cache / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump({"key": key, "policies": len(pool.policies)}, fh)


def _load_pool(cache: Path) -> PolicyPool:
    with open(cache / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    world = recsim.load_world(cache / "world.json")
    policies, datasets = [], []
    for k in range(manifest["policies"]):
        policies.append(recsim.load_policy(cache / f"policy_{k:02d}.json"))
        with np.load(cache / f"data_{k:02d}.npz") as npz:
            datasets.append(
                _dataset_from_arrays(
                    world, f"p{k}", npz["lengths"], npz["actions"],
                    npz["rewards"], npz["behavior_probs"], npz["obs_ids"],
                )
            )
    with open(cache / "truths.json", "r", encoding="utf-8") as fh:
        truths = [tuple(x) for x in json.load(fh)]
    return PolicyPool(world, policies, datasets, truths)


# ---------------------------------------------------------------------------
# Rotation evaluation
# ---------------------------------------------------------------------------


class RotationWorkspace:
    """Per-rotation shared state: target, fitted models, prepared tables.

    Tables are built once for the largest M and sliced for smaller pools, so
    M- and T-sweeps reuse every expensive intermediate.
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        pool: PolicyPool,
        rotation: int,
        max_m: int,
        need_qv: bool,
    ):
        self.cfg = cfg
        self.rotation = rotation
        self.target = recsim.BoundPolicy(pool.policies[rotation], pool.world)
        self.truth = pool.truths[rotation][0]
        behavior_ids = [(rotation + 1 + j) % cfg.pool_size for j in range(max_m)]
        self.behaviors = [pool.datasets[b] for b in behavior_ids]
        self.qv = None
        if need_qv:
            dm = fit_recsim_dm(
                self.behaviors[0],
                pool.world.doc_relevance,
                pool.world.num_users,
                gamma=cfg.gamma,
                iters=cfg.dm_iters,
                ridge_lambda=cfg.dm_lambda,
                logistic_lambda=cfg.dm_logistic_lambda,
                max_trajectories=cfg.dm_train_size,
            )
            self.qv = recsim_qv(dm, pool.world.doc_relevance, self.target)
        horizon = max(ds.horizon_max for ds in self.behaviors)
        self.dc = DiscountConfig(gamma=cfg.gamma, horizon=horizon)
        split_seed = cfg.split_seed + rotation

        self.full_tables = []
        self.var_tables = []
        self.val_tables = []
        for ds in self.behaviors:
            self.full_tables.append(
                prepare_table(ds, self.target, self.dc, cfg.clip, self.qv, horizon)
            )
            var_ds, val_ds = half_split(ds, split_seed)
            self.var_tables.append(
                prepare_table(var_ds, self.target, self.dc, cfg.clip, self.qv, horizon)
            )
            self.val_tables.append(
                prepare_table(val_ds, self.target, self.dc, cfg.clip, self.qv, horizon)
            )
        self.split_seed = split_seed
        self._sc_cache: dict[tuple[str, int], mixture.SplitComponents] = {}

    def _sc(self, family: str, m: int) -> mixture.SplitComponents:
        key = (family, m)
        if key not in self._sc_cache:
            self._sc_cache[key] = mixture.components_from_tables(
                self.var_tables[:m], self.val_tables[:m], Family(family), self.split_seed
            )
        return self._sc_cache[key]

    def method_value(self, name: str, m: int, t_mix: int | None = None):
        """Evaluate one method on the first m behavior policies.

        Returns (estimate, condition_numbers).
        """
        cfg = self.cfg
        tables = self.full_tables[:m]
        if name == "is":
            return estimators.is_value(tables), ()
        if name == "wis":
            return estimators.wis_value(tables), ()
        if name == "swis":
            return estimators.swis_value(tables), ()
        if name == "dr":
            return estimators.dr_value(tables), ()
        if name == "wdr":
            return estimators.wdr_value(tables), ()
        if name == "swdr":
            return estimators.swdr_value(tables), ()
        if name.startswith("nm"):
            family = {"nmis": "is", "nmwis": "swis", "nmdr": "dr", "nmwdr": "swdr"}[name]
            est = mixture.mix_naive_split(self._sc(family, m))
            return est.value, est.condition_numbers
        if name in ("mis", "mwis", "mdr", "mwdr"):
            family = {"mis": "is", "mwis": "swis", "mdr": "dr", "mwdr": "swdr"}[name]
            t = t_mix if t_mix is not None else cfg.t_mix[name]
            t = min(t, self.dc.horizon)
            est = mixture.mix_horizon_split(self._sc(family, m), t, cfg.eps)
            return est.value, est.condition_numbers
        if name in ("abmdr", "abmwdr"):
            family = {"abmdr": "dr", "abmwdr": "swdr"}[name]
            t = t_mix if t_mix is not None else cfg.t_mix[name]
            t = min(t, self.dc.horizon)
            est = mixture.mix_alphabeta_split(self._sc(family, m), t, cfg.eps)
            return est.value, est.condition_numbers
        raise ConfigError(f"unknown method {name!r}")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class TrialRecord:
    method: str
    sweep_value: int
    rotation: int
    estimate: float
    truth: float
    squared_error: float
    sample_split: str  # "validation" | "test"
    mean_cond: float  # nan when the method inverts nothing


@dataclass
class MSEReport:
    sweep: str  # "m" | "t"
    trials: list[TrialRecord]
    truth_se: list[float]
    config_key: str

    def aggregate(self) -> list[dict]:
        """Per (method, sweep_value) rows: MSE overall and per rotation tag."""
        keys = sorted({(t.method, t.sweep_value) for t in self.trials})
        rows = []
        for method, sweep_value in keys:
            sel = [
                t for t in self.trials
                if t.method == method and t.sweep_value == sweep_value
            ]
            errs = np.array([t.squared_error for t in sel])
            conds = np.array([t.mean_cond for t in sel])
            val = [t.squared_error for t in sel if t.sample_split == "validation"]
            test = [t.squared_error for t in sel if t.sample_split == "test"]
            finite = conds[np.isfinite(conds)]
            rows.append(
                {
                    "method": method,
                    "sweep_value": sweep_value,
                    "mse": float(errs.mean()),
                    "mse_validation": float(np.mean(val)) if val else None,
                    "mse_test": float(np.mean(test)) if test else None,
                    "mean_cond": float(finite.mean()) if finite.size else None,
                    "trials": len(sel),
                }
            )
        return rows

    def mse(self, method: str, sweep_value: int) -> float:
        errs = [
            t.squared_error for t in self.trials
            if t.method == method and t.sweep_value == sweep_value
        ]
        return float(np.mean(errs))

    def mean_cond(self, method: str, sweep_value: int | None = None) -> float:
        conds = [
            t.mean_cond for t in self.trials
            if t.method == method
            and (sweep_value is None or t.sweep_value == sweep_value)
            and np.isfinite(t.mean_cond)
        ]
        return float(np.mean(conds)) if conds else float("nan")

    def to_json_dict(self) -> dict:
        return {
            "sweep": self.sweep,
            "config_key": self.config_key,
            "truth_se": self.truth_se,
            "aggregate": self.aggregate(),
            "trials": [dataclasses.asdict(t) for t in self.trials],
        }


def _run_sweep(
    cfg: ExperimentConfig,
    pool: PolicyPool,
    sweep: str,
    points: list[int],
    methods: tuple[str, ...],
    m_fixed: int | None = None,
) -> MSEReport:
    need_qv = any(m in DR_METHODS for m in methods)
    max_m = max(points) if sweep == "m" else (m_fixed or cfg.eval_m)
    trials: list[TrialRecord] = []
    half = cfg.rotations // 2
    for rotation in range(cfg.rotations):
        ws = RotationWorkspace(cfg, pool, rotation, max_m, need_qv)
        tag = "validation" if rotation < half else "test"
        for point in points:
            for name in methods:
                if sweep == "t" and name not in T_METHODS:
                    continue
                m = point if sweep == "m" else max_m
                t_mix = point if sweep == "t" else None
                value, conds = ws.method_value(name, m, t_mix)
                mixing_conds = conds[:-1] if len(conds) > 1 else conds
                trials.append(
                    TrialRecord(
                        method=name,
                        sweep_value=point,
                        rotation=rotation,
                        estimate=value,
                        truth=ws.truth,
                        squared_error=(value - ws.truth) ** 2,
                        sample_split=tag,
                        mean_cond=float(np.mean(mixing_conds)) if mixing_conds else float("nan"),
                    )
                )
    return MSEReport(
        sweep=sweep,
        trials=trials,
        truth_se=[se for (_v, se) in pool.truths],
        config_key=cfg.pool_key(),
    )


def run_rotation(
    cfg: ExperimentConfig,
    pool: PolicyPool | None = None,
    cache_dir=None,
    m: int | None = None,
) -> MSEReport:
    """Full rotation protocol at one behavior-pool size (cfg.eval_m)."""
    pool = pool or build_pool(cfg, cache_dir)
    m = m or cfg.eval_m
    return _run_sweep(cfg, pool, "m", [m], cfg.methods)


def sweep_m(
    cfg: ExperimentConfig, pool: PolicyPool | None = None, cache_dir=None
) -> MSEReport:
    """MSE of every configured method across the M grid."""
    pool = pool or build_pool(cfg, cache_dir)
    return _run_sweep(cfg, pool, "m", list(cfg.m_values), cfg.methods)


def sweep_t(
    cfg: ExperimentConfig,
    pool: PolicyPool | None = None,
    cache_dir=None,
    methods: tuple[str, ...] | None = None,
) -> MSEReport:
    """MSE of the horizon-mixing methods across the T grid at eval_m."""
    pool = pool or build_pool(cfg, cache_dir)
    chosen = methods or tuple(m for m in cfg.methods if m in T_METHODS)
    report = _run_sweep(cfg, pool, "t", list(cfg.t_values), chosen, m_fixed=cfg.eval_m)
    return report


def best_t(report: MSEReport) -> dict[str, int]:
    """argmin-T per method from a T-sweep report."""
    best: dict[str, int] = {}
    for row in report.aggregate():
        method, t, mse = row["method"], row["sweep_value"], row["mse"]
        if method not in best or mse < best[method][1]:
            best[method] = (t, mse)
    return {m: t for m, (t, _) in best.items()}


def emit_report(report: MSEReport, out_dir, fmt: str = "csv") -> list[Path]:
    """Write the report as CSV (method,sweep_value,mse,mean_cond,trials)
    and/or JSON (full per-trial detail)."""
    import csv as csv_mod

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    stem = f"mse_by_{report.sweep}"
    if fmt not in ("csv", "json"):
        raise ConfigError(f"unknown report format {fmt!r}")
    if fmt == "csv":
        path = out_dir / f"{stem}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv_mod.writer(fh)
            writer.writerow(["method", "sweep_value", "mse", "mean_cond", "trials"])
            for row in report.aggregate():
                cond = "" if row["mean_cond"] is None else f"{row['mean_cond']:.6g}"
                writer.writerow(
                    [row["method"], row["sweep_value"], f"{row['mse']:.10g}", cond,
                     row["trials"]]
                )
        written.append(path)
    else:
        path = out_dir / f"{stem}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, indent=1)
        written.append(path)
    return written
