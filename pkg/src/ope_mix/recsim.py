"""Simulated recommender environment, linear softmax-by-relevance policies,
and a small score-function policy-gradient trainer.

The environment is a partially observed process over topics: documents carry
binary topic-relevance vectors, users carry hidden per-topic preferences.
At each step the agent recommends a document; the user either consumes it
(yielding a reward that grows with hidden satisfaction and document quality)
or leaves, ending the episode.  Only the user id and the current document
vector are observable, which is exactly what the logged JSONL observations
contain.

Policies score documents linearly in the observation and pick proportionally
to score . relevance; sampling uses prefix sums over the document list with a
binary search, so a draw costs O(K log D) after O(D) prefix precomputation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .core import BehaviorDataset, Obs, Step, StepArrays, Trajectory

# Additive floor on topic scores.  Strict positivity keeps every action
# probability positive (mutual support across policies); the magnitude also
# caps how extreme importance ratios can get between very different policies.
SCORE_FLOOR = 0.05

ENGAGEMENT_STD = 0.1
INTEREST_STD = 0.1
INTEREST_DECAY = 0.9
SATISFACTION_SLOPE = 0.5


@dataclass(frozen=True)
class Document:
    relevance: np.ndarray  # {0,1}^K, 1-3 set bits
    quality: float  # hidden


@dataclass(frozen=True)
class TopicWorld:
    """Static environment data: topic abundance/quality, the document
    corpus, and the hidden per-user preference vectors."""

    abundance: np.ndarray  # (K,), simplex
    topic_quality: np.ndarray  # (K,) in [0, 1]
    doc_relevance: np.ndarray  # (D, K) binary
    doc_quality: np.ndarray  # (D,), hidden
    preferences: np.ndarray  # (U, K) in [-1, 1], hidden
    seed: int

    @property
    def num_topics(self) -> int:
        return self.abundance.shape[0]

    @property
    def num_docs(self) -> int:
        return self.doc_relevance.shape[0]

    @property
    def num_users(self) -> int:
        return self.preferences.shape[0]

    @property
    def doc_prefix(self) -> np.ndarray:
        """Cumulative relevance sums b_k = sum_{j<=k} r_j for the sampler."""
        cached = getattr(self, "_doc_prefix", None)
        if cached is None:
            cached = np.cumsum(self.doc_relevance, axis=0)
            object.__setattr__(self, "_doc_prefix", cached)
        return cached

    @property
    def d_states(self) -> np.ndarray:
        """All observable document vectors: the all-ones start plus each doc."""
        cached = getattr(self, "_d_states", None)
        if cached is None:
            cached = np.vstack([np.ones((1, self.num_topics)), self.doc_relevance])
            object.__setattr__(self, "_d_states", cached)
        return cached

    def document(self, i: int) -> Document:
        return Document(relevance=self.doc_relevance[i].copy(), quality=float(self.doc_quality[i]))

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "abundance": self.abundance.tolist(),
            "topic_quality": self.topic_quality.tolist(),
            "doc_relevance": self.doc_relevance.astype(int).tolist(),
            "doc_quality": self.doc_quality.tolist(),
            "preferences": self.preferences.tolist(),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "TopicWorld":
        return TopicWorld(
            abundance=np.asarray(d["abundance"], dtype=float),
            topic_quality=np.asarray(d["topic_quality"], dtype=float),
            doc_relevance=np.asarray(d["doc_relevance"], dtype=float),
            doc_quality=np.asarray(d["doc_quality"], dtype=float),
            preferences=np.asarray(d["preferences"], dtype=float),
            seed=int(d["seed"]),
        )


def save_world(world: TopicWorld, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(world.to_json_dict(), fh)


def load_world(path) -> TopicWorld:
    with open(path, "r", encoding="utf-8") as fh:
        return TopicWorld.from_json_dict(json.load(fh))


def generate_world(
    seed: int, num_topics: int = 20, num_docs: int = 100, num_users: int = 5
) -> TopicWorld:
    """Sample a world: abundance normalized onto the simplex, uniform topic
    qualities and user preferences, and documents built from three repeatable
    abundance-weighted topic draws (so 1-3 distinct set bits each)."""
    rng = np.random.default_rng(seed)
    abundance = rng.random(num_topics)
    abundance = abundance / abundance.sum()
    topic_quality = rng.random(num_topics)
    preferences = rng.uniform(-1.0, 1.0, size=(num_users, num_topics))
    draws = rng.choice(num_topics, size=(num_docs, 3), p=abundance)
    relevance = np.zeros((num_docs, num_topics))
    relevance[np.arange(num_docs)[:, None], draws] = 1.0
    doc_quality = (relevance @ topic_quality + rng.random(num_docs)) / 2.0
    return TopicWorld(
        abundance=abundance,
        topic_quality=topic_quality,
        doc_relevance=relevance,
        doc_quality=doc_quality,
        preferences=preferences,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Hidden-state dynamics
# ---------------------------------------------------------------------------


def satisfaction_of(interest: float) -> float:
    return 1.0 / (1.0 + math.exp(-SATISFACTION_SLOPE * interest))


@dataclass(frozen=True)
class HiddenState:
    user_id: int
    interest: float
    satisfaction: float
    doc_vector: np.ndarray

    def obs(self) -> Obs:
        return {"user": float(self.user_id), "d": [float(x) for x in self.doc_vector]}


def initial_state(world: TopicWorld, rng: np.random.Generator) -> HiddenState:
    user = int(rng.integers(world.num_users))
    interest = float(rng.standard_normal())
    return HiddenState(
        user_id=user,
        interest=interest,
        satisfaction=satisfaction_of(interest),
        doc_vector=np.ones(world.num_topics),
    )


def liking(world: TopicWorld, state: HiddenState, doc_index: int) -> float:
    """User's liking of a candidate: preference-weighted overlap with the
    candidate's topics, boosted by the current document.  Negative raw values
    (possible since preferences live in [-1, 1]) are clamped to 0 so the
    take probability l / (1 + l) stays well defined."""
    rel = world.doc_relevance[doc_index]
    pref = world.preferences[state.user_id]
    raw = float((rel * pref * (state.doc_vector + 0.5) / 2.0).sum())
    return max(raw, 0.0)


def env_step(
    state: HiddenState, doc_index: int, world: TopicWorld, rng: np.random.Generator
) -> tuple[float, HiddenState | None]:
    """One environment transition.

    With probability l/(1+l) the user takes the document: the reward is
    satisfaction * exp(engagement) with engagement ~ N(doc quality, 0.1^2),
    the interest decays and absorbs the preference overlap plus noise, and
    the document vector becomes the candidate's relevance.  Otherwise the
    user leaves: reward 0 and no successor state.
    """
    like = liking(world, state, doc_index)
    if rng.random() >= like / (1.0 + like):
        return 0.0, None
    engagement = float(rng.normal(world.doc_quality[doc_index], ENGAGEMENT_STD))
    reward = state.satisfaction * math.exp(engagement)
    rel = world.doc_relevance[doc_index]
    interest = (
        INTEREST_DECAY * state.interest
        + float(world.preferences[state.user_id] @ rel)
        + float(rng.normal(0.0, INTEREST_STD))
    )
    next_state = HiddenState(
        user_id=state.user_id,
        interest=interest,
        satisfaction=satisfaction_of(interest),
        doc_vector=rel.copy(),
    )
    return reward, next_state


# ---------------------------------------------------------------------------
# Linear softmax-by-relevance policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearPolicy:
    """Maps observation features (user one-hot ++ document vector) to a
    strictly positive topic-score vector y; document probabilities are
    proportional to y . r_j."""

    weights: np.ndarray  # (K, U + K)
    temperature: float = 1.0

    def to_json_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "temperature": self.temperature}

    @staticmethod
    def from_json_dict(d: dict) -> "LinearPolicy":
        return LinearPolicy(
            weights=np.asarray(d["weights"], dtype=float),
            temperature=float(d["temperature"]),
        )


def save_policy(policy: LinearPolicy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy.to_json_dict(), fh)


def load_policy(path) -> LinearPolicy:
    with open(path, "r", encoding="utf-8") as fh:
        return LinearPolicy.from_json_dict(json.load(fh))


def initial_policy(world: TopicWorld, seed: int, temperature: float = 1.0,
                   scale: float = 0.1) -> LinearPolicy:
    rng = np.random.default_rng(seed)
    shape = (world.num_topics, world.num_users + world.num_topics)
    return LinearPolicy(weights=scale * rng.standard_normal(shape), temperature=temperature)


def obs_features(world: TopicWorld, user_id: int, doc_vector: np.ndarray) -> np.ndarray:
    x = np.zeros(world.num_users + world.num_topics)
    x[user_id] = 1.0
    x[world.num_users :] = doc_vector
    return x


def policy_scores(policy: LinearPolicy, obs: Obs, world: TopicWorld) -> np.ndarray:
    x = obs_features(world, int(obs["user"]), np.asarray(obs["d"], dtype=float))
    z = policy.weights @ x / policy.temperature
    return np.logaddexp(0.0, z) + SCORE_FLOOR  # softplus, floored away from 0


def policy_probs(policy: LinearPolicy, obs: Obs, world: TopicWorld) -> np.ndarray:
    """Probability of recommending each document: y.r_j normalized."""
    y = policy_scores(policy, obs, world)
    scores = world.doc_relevance @ y
    return scores / scores.sum()


def sample_action(
    policy: LinearPolicy, obs: Obs, world: TopicWorld, rng: np.random.Generator
) -> int:
    """Inverse-CDF draw via binary search over prefix relevance sums."""
    y = policy_scores(policy, obs, world)
    prefix = world.doc_prefix
    threshold = rng.random() * float(prefix[-1] @ y)
    lo, hi = 0, world.num_docs - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if float(prefix[mid] @ y) >= threshold:
            hi = mid
        else:
            lo = mid + 1
    return lo


@dataclass(frozen=True)
class BoundPolicy:
    """A LinearPolicy bound to its world, exposing the target-policy
    interface the estimators consume (probabilities of logged actions)."""

    policy: LinearPolicy
    world: TopicWorld

    def prob(self, obs: Obs, action: int) -> float:
        y = policy_scores(self.policy, obs, self.world)
        return float(self.world.doc_relevance[action] @ y) / float(
            self.world.doc_prefix[-1] @ y
        )

    def action_probs_many(self, obs_seq) -> np.ndarray:
        world = self.world
        users = np.array([int(o["user"]) for o in obs_seq], dtype=np.int64)
        d_mat = np.array([np.asarray(o["d"], dtype=float) for o in obs_seq])
        feats = np.hstack([np.eye(world.num_users)[users], d_mat])
        z = feats @ self.policy.weights.T / self.policy.temperature
        y = np.logaddexp(0.0, z) + SCORE_FLOOR
        scores = y @ world.doc_relevance.T
        return scores / scores.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Batched rollouts
# ---------------------------------------------------------------------------


def _batch_scores(policy: LinearPolicy, world: TopicWorld, users: np.ndarray,
                  d_idx: np.ndarray) -> np.ndarray:
    feats = np.hstack([np.eye(world.num_users)[users], world.d_states[d_idx]])
    z = feats @ policy.weights.T / policy.temperature
    return np.logaddexp(0.0, z) + SCORE_FLOOR


def _batch_rollout(
    policy: LinearPolicy,
    world: TopicWorld,
    n: int,
    max_len: int,
    seed: int,
    gamma: float = 1.0,
    keep_steps: bool = True,
):
    """Vectorized episode roll-out; one seeded generator drives fixed
    per-(trajectory, step) draw slots, so results are reproducible and
    independent of batch internals.

    Draw slots per step: action uniform, take/leave uniform, engagement
    normal, interest-noise normal (drawn up-front whether used or not).
    """
    rng = np.random.default_rng(seed)
    uniforms = rng.random((n, max_len, 2))
    normals = rng.standard_normal((n, max_len, 2))
    users = rng.integers(0, world.num_users, size=n)
    interest = rng.standard_normal(n)
    d_idx = np.zeros(n, dtype=np.int64)  # 0 = all-ones start vector

    actions = np.zeros((n, max_len), dtype=np.int64)
    rewards = np.zeros((n, max_len))
    probs = np.ones((n, max_len))
    obs_user = np.zeros((n, max_len), dtype=np.int64)
    obs_d = np.zeros((n, max_len), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    returns = np.zeros(n)

    alive = np.arange(n)
    for t in range(max_len):
        if alive.size == 0:
            break
        u, di = users[alive], d_idx[alive]
        y = _batch_scores(policy, world, u, di)
        doc_scores = y @ world.doc_relevance.T
        cum = np.cumsum(doc_scores, axis=1)
        thresholds = uniforms[alive, t, 0] * cum[:, -1]
        acts = np.minimum((cum < thresholds[:, None]).sum(axis=1), world.num_docs - 1)
        act_probs = doc_scores[np.arange(alive.size), acts] / cum[:, -1]

        rel = world.doc_relevance[acts]
        pref = world.preferences[u]
        like = np.maximum(
            (rel * pref * (world.d_states[di] + 0.5) / 2.0).sum(axis=1), 0.0
        )
        take = uniforms[alive, t, 1] < like / (1.0 + like)
        satisfaction = 1.0 / (1.0 + np.exp(-SATISFACTION_SLOPE * interest[alive]))
        engagement = world.doc_quality[acts] + ENGAGEMENT_STD * normals[alive, t, 0]
        step_rewards = np.where(take, satisfaction * np.exp(engagement), 0.0)

        actions[alive, t] = acts
        rewards[alive, t] = step_rewards
        probs[alive, t] = act_probs
        obs_user[alive, t] = u
        obs_d[alive, t] = di
        lengths[alive] = t + 1
        returns[alive] += gamma**t * step_rewards

        interest[alive] = np.where(
            take,
            INTEREST_DECAY * interest[alive]
            + (pref * rel).sum(axis=1)
            + INTEREST_STD * normals[alive, t, 1],
            interest[alive],
        )
        d_idx[alive] = np.where(take, acts + 1, d_idx[alive])
        alive = alive[take]

    if not keep_steps:
        return returns
    max_used = int(lengths.max())
    return (
        lengths,
        actions[:, :max_used],
        rewards[:, :max_used],
        probs[:, :max_used],
        obs_user[:, :max_used],
        obs_d[:, :max_used],
        returns,
    )


def _obs_grid(world: TopicWorld) -> list[Obs]:
    """Shared observation dicts for every (user, document-state) pair,
    indexed as user * (D+1) + d_index."""
    d_lists = [[float(x) for x in row] for row in world.d_states]
    return [
        {"user": float(u), "d": d_lists[di]}
        for u in range(world.num_users)
        for di in range(world.num_docs + 1)
    ]


def collect(
    policy: LinearPolicy,
    world: TopicWorld,
    n_trajectories: int,
    max_len: int,
    seed: int,
    policy_id: str = "pi",
) -> BehaviorDataset:
    """Roll out logged trajectories; episodes end on leave or at max_len.

    Every step logs the behavior probability of the sampled document; the
    final step of a left episode carries reward 0.
    """
    lengths, actions, rewards, probs, obs_user, obs_d, _ = _batch_rollout(
        policy, world, n_trajectories, max_len, seed
    )
    grid = _obs_grid(world)
    obs_ids = obs_user * (world.num_docs + 1) + obs_d
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
        for j in range(n_trajectories)
    )
    arrays = StepArrays(
        lengths=lengths,
        actions=actions,
        rewards=rewards,
        behavior_probs=probs,
        obs_ids=obs_ids,
        unique_obs=tuple(grid),
    )
    return BehaviorDataset(policy_id, trajectories, arrays=arrays)


def rollout_returns(
    policy: LinearPolicy,
    world: TopicWorld,
    n: int,
    max_len: int,
    seed: int,
    gamma: float,
) -> np.ndarray:
    """Discounted returns of n on-policy episodes (no logging overhead)."""
    return _batch_rollout(policy, world, n, max_len, seed, gamma=gamma, keep_steps=False)


# ---------------------------------------------------------------------------
# Policy-gradient training
# ---------------------------------------------------------------------------


def log_prob_gradient(
    policy: LinearPolicy, world: TopicWorld, user_id: int, doc_vector: np.ndarray,
    action: int,
) -> np.ndarray:
    """d log pi(action | obs) / d weights, shape (K, U + K)."""
    x = obs_features(world, user_id, doc_vector)
    z = policy.weights @ x / policy.temperature
    y = np.logaddexp(0.0, z) + SCORE_FLOOR
    rel = world.doc_relevance[action]
    total = world.doc_prefix[-1]
    gy = rel / float(rel @ y) - total / float(total @ y)
    gz = gy * _sigmoid(z) / policy.temperature
    return np.outer(gz, x)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def reinforce_train(
    init: LinearPolicy,
    world: TopicWorld,
    episodes: int,
    lr: float,
    seed: int,
    gamma: float = 0.9,
    max_len: int = 20,
    batch_size: int = 16,
    clip_norm: float = 10.0,
) -> LinearPolicy:
    """Score-function gradient ascent on the linear policy parameters.

    Each step of an episode contributes grad log pi * (discounted
    return-to-go); gradients are averaged over small episode batches and
    clipped in norm for stability.  lr=0 returns the policy unchanged.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    policy = init
    rng = np.random.default_rng(seed)
    done = 0
    while done < episodes:
        batch = min(batch_size, episodes - done)
        grad = np.zeros_like(policy.weights)
        for _ in range(batch):
            state = initial_state(world, rng)
            transitions = []
            for _t in range(max_len):
                obs = state.obs()
                action = sample_action(policy, obs, world, rng)
                reward, nxt = env_step(state, action, world, rng)
                transitions.append((state.user_id, state.doc_vector, action, reward))
                if nxt is None:
                    break
                state = nxt
            rewards = np.array([tr[3] for tr in transitions])
            togo = 0.0
            returns_togo = np.empty(len(rewards))
            for t in range(len(rewards) - 1, -1, -1):
                togo = rewards[t] + gamma * togo
                returns_togo[t] = togo
            for (user, dvec, action, _r), g_t in zip(transitions, returns_togo):
                grad += g_t * log_prob_gradient(policy, world, user, dvec, action)
        grad /= batch
        norm = float(np.linalg.norm(grad))
        if norm > clip_norm:
            grad *= clip_norm / norm
        if lr > 0:
            policy = replace(policy, weights=policy.weights + lr * grad)
        done += batch
    return policy


def mean_return(
    policy: LinearPolicy, world: TopicWorld, episodes: int, max_len: int, seed: int,
    gamma: float,
) -> tuple[float, float]:
    """Mean discounted return and its standard error over fresh episodes."""
    returns = rollout_returns(policy, world, episodes, max_len, seed, gamma)
    return float(returns.mean()), float(returns.std(ddof=1) / math.sqrt(episodes))
