"""Model fitting and the value recursion behind the DR control variates.

Fits a mean-reward model (ridge regression on step features) and a
transition model (tabular counts for discrete state spaces, a binary
continue/stop logistic model for the recommender environment), then runs
the coupled recursion

    Q_t(s, a) = R(s, a) + gamma * E_{s' ~ P(.|s,a)}[V_{t-1}(s')]
    V_t(s)    = E_{a ~ pi(.|s)}[Q_t(s, a)]

from V_0 = 0 for a fixed number of sweeps.  The resulting provider exposes
q(obs, action) and v(obs) and always satisfies v = sum_a pi(a|s) q(s, a).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import linalg
from .core import BehaviorDataset, MultiDataset, Obs, TargetPolicy


class QVProvider(Protocol):
    def q(self, obs: Obs, action: int) -> float: ...

    def v(self, obs: Obs) -> float: ...


class ZeroQV:
    """Provider that returns 0 everywhere (turns DR back into IS)."""

    is_zero = True

    def q(self, obs: Obs, action: int) -> float:
        return 0.0

    def v(self, obs: Obs) -> float:
        return 0.0


@dataclass(frozen=True)
class RidgeModel:
    """Centered ridge regression fit: weights solve (Xc'Xc + lam I) w = Xc'yc."""

    weights: np.ndarray
    intercept: float
    lam: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) @ self.weights + self.intercept

    def to_json_dict(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "intercept": float(self.intercept),
            "lambda": float(self.lam),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "RidgeModel":
        return RidgeModel(
            weights=np.asarray(d["weights"], dtype=float),
            intercept=float(d["intercept"]),
            lam=float(d["lambda"]),
        )


def fit_ridge(features: np.ndarray, targets: np.ndarray, lam: float) -> RidgeModel:
    """Normal-equations ridge fit with centering (intercept unpenalized)."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    x = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(targets, dtype=float)
    if x.shape[0] != y.shape[0] or x.shape[0] < 1:
        raise ValueError("features and targets must have matching rows (>= 1)")
    x_mean = x.mean(axis=0)
    y_mean = float(y.mean())
    xc = x - x_mean
    gram = xc.T @ xc + lam * np.eye(x.shape[1])
    weights = linalg.spd_solve(linalg.symmetrize(gram), xc.T @ (y - y_mean))
    return RidgeModel(weights=weights, intercept=y_mean - float(x_mean @ weights), lam=lam)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    intercept: float

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(np.asarray(features, dtype=float) @ self.weights + self.intercept)

    def to_json_dict(self) -> dict:
        return {"weights": [float(w) for w in self.weights], "intercept": float(self.intercept)}


def fit_logistic(
    features: np.ndarray,
    labels: np.ndarray,
    lam: float = 1e-3,
    max_iter: int = 40,
    tol: float = 1e-9,
) -> LogisticModel:
    """Ridge-penalized logistic regression via iteratively reweighted
    least squares."""
    x = np.hstack([np.asarray(features, dtype=float), np.ones((len(labels), 1))])
    y = np.asarray(labels, dtype=float)
    beta = np.zeros(x.shape[1])
    penalty = lam * np.eye(x.shape[1])
    penalty[-1, -1] = 0.0  # intercept unpenalized
    for _ in range(max_iter):
        p = _sigmoid(x @ beta)
        w = np.maximum(p * (1.0 - p), 1e-9)
        hess = linalg.symmetrize(x.T @ (w[:, None] * x) + penalty)
        grad = x.T @ (y - p) - penalty @ beta
        step = linalg.spd_solve(hess, grad)
        beta = beta + step
        if float(np.abs(step).max()) < tol:
            break
    return LogisticModel(weights=beta[:-1], intercept=float(beta[-1]))


@dataclass(frozen=True)
class EmpiricalTransition:
    """Fitted transition model: either a dense tabular conditional
    distribution or a single-successor chain with a continue probability
    (the continue/stop reading of the recommender dynamics; the value of
    stopping is 0)."""

    kind: str  # "tabular" | "continue_stop"
    probs: np.ndarray | None = None  # (S, A, S)
    next_state: np.ndarray | None = None  # (S, A) int
    p_continue: np.ndarray | None = None  # (S, A)

    def __post_init__(self):
        if self.kind == "tabular":
            if self.probs is None or not np.allclose(self.probs.sum(axis=2), 1.0, atol=1e-9):
                raise ValueError("tabular transition rows must sum to 1")
        elif self.kind == "continue_stop":
            if self.next_state is None or self.p_continue is None:
                raise ValueError("continue_stop needs next_state and p_continue")
        else:
            raise ValueError(f"unknown transition kind {self.kind!r}")

    def expected_value(self, v: np.ndarray) -> np.ndarray:
        """E_{s'}[V(s')] as an (S, A) table; the stop branch contributes 0."""
        if self.kind == "tabular":
            return np.einsum("sau,u->sa", self.probs, v)
        return self.p_continue * v[self.next_state]

    @staticmethod
    def from_counts(counts: np.ndarray) -> "EmpiricalTransition":
        counts = np.asarray(counts, dtype=float)
        totals = counts.sum(axis=2, keepdims=True)
        uniform = np.full_like(counts, 1.0 / counts.shape[2])
        probs = np.where(totals > 0, counts / np.maximum(totals, 1.0), uniform)
        return EmpiricalTransition(kind="tabular", probs=probs)


class StateIndexer:
    """Maps {"s": k} observations to tabular state indices."""

    def __call__(self, obs: Obs) -> int:
        return int(obs["s"])

    def many(self, obs_seq: Sequence[Obs]) -> np.ndarray:
        return np.array([int(o["s"]) for o in obs_seq], dtype=np.int64)


@dataclass(frozen=True)
class TableQV:
    """Q/V provider backed by dense tables plus an observation indexer."""

    q_table: np.ndarray  # (S, A)
    v_table: np.ndarray  # (S,)
    indexer: object

    def q(self, obs: Obs, action: int) -> float:
        return float(self.q_table[self.indexer(obs), action])

    def v(self, obs: Obs) -> float:
        return float(self.v_table[self.indexer(obs)])

    def q_matrix(self, obs_seq: Sequence[Obs]) -> np.ndarray:
        return self.q_table[self.indexer.many(obs_seq)]

    def v_many(self, obs_seq: Sequence[Obs]) -> np.ndarray:
        return self.v_table[self.indexer.many(obs_seq)]


def value_iteration(
    r_hat: np.ndarray | RidgeModel,
    p_hat: EmpiricalTransition,
    target: TargetPolicy,
    gamma: float,
    iters: int,
    state_obs: Sequence[Obs] | None = None,
    r_features: np.ndarray | None = None,
    indexer: object | None = None,
) -> TableQV:
    """Run the Q/V recursion for ``iters`` sweeps and return the final pair.

    ``r_hat`` is a mean-reward table (S, A), or a RidgeModel together with
    per-(s, a) feature rows ``r_features`` of shape (S, A, F).
    """
    if isinstance(r_hat, RidgeModel):
        if r_features is None:
            raise ValueError("RidgeModel rewards need r_features of shape (S, A, F)")
        s_dim, a_dim, f_dim = r_features.shape
        r_table = r_hat.predict(r_features.reshape(-1, f_dim)).reshape(s_dim, a_dim)
    else:
        r_table = np.asarray(r_hat, dtype=float)
    num_states, num_actions = r_table.shape
    if indexer is None:
        indexer = StateIndexer()
    if state_obs is None:
        state_obs = [{"s": float(s)} for s in range(num_states)]
    if hasattr(target, "action_probs_many"):
        pi = np.asarray(target.action_probs_many(state_obs), dtype=float)
    else:
        pi = np.array(
            [[target.prob(o, a) for a in range(num_actions)] for o in state_obs]
        )

    v = np.zeros(num_states)
    q = np.zeros((num_states, num_actions))
    for _ in range(iters):
        q = r_table + gamma * p_hat.expected_value(v)
        v = (pi * q).sum(axis=1)
    return TableQV(q_table=q, v_table=v, indexer=indexer)


def dm_value(qv: QVProvider, initial_obs: Sequence[Obs]) -> float:
    """Direct-method value: mean of v(s) over initial-state samples."""
    if len(initial_obs) == 0:
        raise ValueError("dm_value needs a nonempty sample of initial states")
    if hasattr(qv, "v_many"):
        return float(np.mean(qv.v_many(initial_obs)))
    return float(np.mean([qv.v(o) for o in initial_obs]))


# ---------------------------------------------------------------------------
# Recommender-environment direct method
# ---------------------------------------------------------------------------


class RecsimObsIndexer:
    """Maps {"user": u, "d": vector} observations onto the enumerable
    observable-state grid: index = user * (D+1) + doc_index, where
    doc_index 0 is the all-ones initial vector and 1..D are the documents."""

    def __init__(self, docs: np.ndarray, num_users: int):
        self.num_users = num_users
        self.num_docs = docs.shape[0]
        self._lookup = {self._key(np.ones(docs.shape[1])): 0}
        for i, row in enumerate(docs):
            self._lookup[self._key(row)] = i + 1

    @staticmethod
    def _key(vec) -> bytes:
        return np.asarray(vec, dtype=np.int8).tobytes()

    def doc_index(self, d_vec) -> int:
        return self._lookup[self._key(d_vec)]

    def __call__(self, obs: Obs) -> int:
        return int(obs["user"]) * (self.num_docs + 1) + self.doc_index(obs["d"])

    def many(self, obs_seq: Sequence[Obs]) -> np.ndarray:
        return np.array([self(o) for o in obs_seq], dtype=np.int64)


def recsim_features(
    user_idx: np.ndarray, d_mat: np.ndarray, r_mat: np.ndarray, num_users: int
) -> np.ndarray:
    """Step features for the reward/continuation models: user one-hot,
    the candidate's relevance vector, its overlap with the current document,
    and user-specific relevance interactions."""
    onehot = np.eye(num_users)[user_idx]
    interact = (onehot[:, :, None] * r_mat[:, None, :]).reshape(len(user_idx), -1)
    return np.hstack([onehot, r_mat, d_mat * r_mat, interact])


@dataclass(frozen=True)
class RecsimDM:
    """Fitted reward + continue/stop models for the recommender environment."""

    reward_model: RidgeModel
    continue_model: LogisticModel
    num_users: int
    iters: int
    gamma: float

    def to_json_dict(self) -> dict:
        return {
            "reward_model": self.reward_model.to_json_dict(),
            "continue_model": self.continue_model.to_json_dict(),
            "num_users": self.num_users,
            "iters": self.iters,
            "gamma": self.gamma,
        }


def _parse_recsim_obs(unique_obs: Sequence[Obs]) -> tuple[np.ndarray, np.ndarray]:
    users = np.array([int(o["user"]) for o in unique_obs], dtype=np.int64)
    d_mat = np.array([np.asarray(o["d"], dtype=float) for o in unique_obs])
    return users, d_mat


def fit_recsim_dm(
    data: MultiDataset | BehaviorDataset,
    docs: np.ndarray,
    num_users: int,
    gamma: float,
    iters: int = 20,
    ridge_lambda: float = 1.0,
    logistic_lambda: float = 1e-3,
    max_trajectories: int = 10_000,
) -> RecsimDM:
    """Fit the reward and continuation models from logged trajectories.

    A step is labeled "continue" when a successor step exists in the log, so
    an episode cut off by the length cap counts as a stop; the resulting
    continuation model is slightly pessimistic at the cap.
    """
    datasets = data.datasets if isinstance(data, MultiDataset) else (data,)
    feats, rewards, labels = [], [], []
    budget = max_trajectories
    for ds in datasets:
        if budget <= 0:
            break
        take = min(budget, ds.n)
        budget -= take
        arrays = ds.step_arrays()
        users, d_mat = _parse_recsim_obs(arrays.unique_obs)
        for j in range(take):
            length = int(arrays.lengths[j])
            ids = arrays.obs_ids[j, :length]
            acts = arrays.actions[j, :length]
            feats.append(
                recsim_features(users[ids], d_mat[ids], docs[acts], num_users)
            )
            rewards.append(arrays.rewards[j, :length])
            cont = np.zeros(length)
            cont[: length - 1] = 1.0
            labels.append(cont)
    x = np.vstack(feats)
    return RecsimDM(
        reward_model=fit_ridge(x, np.concatenate(rewards), ridge_lambda),
        continue_model=fit_logistic(x, np.concatenate(labels), logistic_lambda),
        num_users=num_users,
        iters=iters,
        gamma=gamma,
    )


def recsim_qv(dm: RecsimDM, docs: np.ndarray, target: TargetPolicy) -> TableQV:
    """Build the Q/V provider over the enumerable observable states.

    States are (user, current document) pairs; recommending document a moves
    the observable state to (user, a) when the user continues and ends the
    episode otherwise.
    """
    num_docs, num_topics = docs.shape
    indexer = RecsimObsIndexer(docs, dm.num_users)
    d_states = np.vstack([np.ones((1, num_topics)), docs])  # (D+1, K)
    num_states = dm.num_users * (num_docs + 1)

    grid_u, grid_d, grid_a = np.meshgrid(
        np.arange(dm.num_users), np.arange(num_docs + 1), np.arange(num_docs),
        indexing="ij",
    )
    flat_u, flat_d, flat_a = grid_u.ravel(), grid_d.ravel(), grid_a.ravel()
    feats = recsim_features(flat_u, d_states[flat_d], docs[flat_a], dm.num_users)
    r_table = dm.reward_model.predict(feats).reshape(num_states, num_docs)
    p_cont = dm.continue_model.predict_proba(feats).reshape(num_states, num_docs)
    # successor of ((u, d), a) is (u, a+1) in doc-index coordinates
    next_state = (flat_u * (num_docs + 1) + flat_a + 1).reshape(num_states, num_docs)
    p_hat = EmpiricalTransition(
        kind="continue_stop", next_state=next_state, p_continue=p_cont
    )

    state_obs = [
        {"user": float(u), "d": [float(x) for x in d_states[di]]}
        for u in range(dm.num_users)
        for di in range(num_docs + 1)
    ]
    return value_iteration(
        r_table, p_hat, target, dm.gamma, dm.iters, state_obs=state_obs, indexer=indexer
    )
