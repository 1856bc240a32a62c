"""Soft actor-critic on numpy: replay buffer, squashed-Gaussian policy, twin critics.

Actions live in policy space [-1, 1]^2 everywhere inside the learner (buffer,
critics, log-probs). Scaling to physical controls happens only at the
environment boundary via to_env_action().
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .nn import AdamState, Mlp, adam_step, load_checkpoint, save_checkpoint, soft_update
from .vehicle import MAX_STEER, Action

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
LOG_STD_INIT = -0.5
_LOG_2PI = float(np.log(2.0 * np.pi))


def to_env_action(a_norm: np.ndarray) -> Action:
    """Map a policy-space action in [-1, 1]^2 to physical controls."""
    a = np.asarray(a_norm, dtype=np.float64).reshape(2)
    return Action(steering=float(a[0]) * MAX_STEER, pedal=float(a[1]))


@dataclass(frozen=True)
class Transition:
    observation: np.ndarray
    action: np.ndarray
    reward: float
    next_observation: np.ndarray
    done: bool

    def __post_init__(self) -> None:
        if not math.isfinite(self.reward):
            raise ContractViolation(f"transition reward must be finite, got {self.reward}")


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling (with replacement)."""

    def __init__(self, capacity: int = 1_000_000, obs_dim: int = 96, act_dim: int = 2):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.act = np.zeros((capacity, act_dim), dtype=np.float32)
        self.rew = np.zeros(capacity, dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.done = np.zeros(capacity, dtype=np.float32)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def push(self, transition: Transition) -> None:
        i = self.cursor
        self.obs[i] = transition.observation
        self.act[i] = transition.action
        self.rew[i] = transition.reward
        self.next_obs[i] = transition.next_observation
        self.done[i] = float(transition.done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_many(self, obs, act, rew, next_obs, done) -> None:
        """Vectorized insert; rows are appended in order, wrapping as needed."""
        n = len(rew)
        for start in range(0, n, self.capacity):
            block = min(self.capacity - self.cursor, n - start)
            sl = slice(start, start + block)
            dst = slice(self.cursor, self.cursor + block)
            self.obs[dst] = obs[sl]
            self.act[dst] = act[sl]
            self.rew[dst] = rew[sl]
            self.next_obs[dst] = next_obs[sl]
            self.done[dst] = done[sl]
            self.cursor = (self.cursor + block) % self.capacity
            self.size = min(self.size + block, self.capacity)
            if block < n - start:
                # wrapped mid-batch; continue from the ring start
                rest = slice(start + block, min(start + self.capacity, n))
                m = rest.stop - rest.start
                self.obs[:m] = obs[rest]
                self.act[:m] = act[rest]
                self.rew[:m] = rew[rest]
                self.next_obs[:m] = next_obs[rest]
                self.done[:m] = done[rest]
                self.cursor = m % self.capacity
                self.size = min(self.size + m, self.capacity)

    def sample(self, n: int, rng: np.random.Generator):
        if self.size == 0:
            raise ContractViolation("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        return (self.obs[idx], self.act[idx], self.rew[idx],
                self.next_obs[idx], self.done[idx])


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _tanh_log_prob(u: np.ndarray, xi: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Row log-density of a = tanh(u), u = mu + sigma*xi, per sample."""
    gauss = -0.5 * xi * xi - log_std - 0.5 * _LOG_2PI
    # log(1 - tanh(u)^2) = 2*(log 2 - u - softplus(-2u)), numerically safe
    squash = 2.0 * (np.log(2.0) - u - _softplus(-2.0 * u))
    return (gauss - squash).sum(axis=1)


class SacAgent:
    """Twin-critic SAC with learned temperature and a tanh Gaussian policy."""

    def __init__(self, obs_dim: int = 96, act_dim: int = 2, hidden=(256, 256),
                 lr: float = 0.001, gamma: float = 0.99, tau: float = 0.005,
                 batch_size: int = 4096, target_entropy: float | None = None,
                 seed: int = 0):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.gamma = gamma
        self.tau = tau
        self.batch_size = batch_size
        self.target_entropy = float(-act_dim if target_entropy is None else target_entropy)
        self.rng = np.random.default_rng(seed)

        self.policy = Mlp([obs_dim, *hidden, 2 * act_dim], rng=self.rng)
        self.q1 = Mlp([obs_dim + act_dim, *hidden, 1], rng=self.rng)
        self.q2 = Mlp([obs_dim + act_dim, *hidden, 1], rng=self.rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_alpha = np.zeros((), dtype=np.float32)

        self.opt_policy = AdamState(self.policy.parameters(), lr=lr)
        self.opt_q1 = AdamState(self.q1.parameters(), lr=lr)
        self.opt_q2 = AdamState(self.q2.parameters(), lr=lr)
        self.opt_alpha = AdamState([self.log_alpha], lr=lr)
        self.reinit_exploration()

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    def reinit_exploration(self) -> None:
        """Zero the log-std head (bias -0.5) and reset the temperature.

        The action-mean head, critics and their optimizer state are untouched,
        so previously learned behaviour survives while exploration restarts
        wide open.
        """
        w_last = self.policy.weights[-1]
        b_last = self.policy.biases[-1]
        w_last[:, self.act_dim:] = 0.0
        b_last[self.act_dim:] = LOG_STD_INIT
        self.log_alpha[...] = 0.0
        self.opt_alpha = AdamState([self.log_alpha], lr=self.opt_alpha.lr)
        # stale momentum on the reset slices would immediately undo the reset
        n_params = len(self.opt_policy.m)
        self.opt_policy.m[n_params - 2][:, self.act_dim:] = 0.0
        self.opt_policy.v[n_params - 2][:, self.act_dim:] = 0.0
        self.opt_policy.m[n_params - 1][self.act_dim:] = 0.0
        self.opt_policy.v[n_params - 1][self.act_dim:] = 0.0

    # -- acting -----------------------------------------------------------------

    def _policy_heads(self, obs_batch: np.ndarray):
        out, cache = self.policy.forward(obs_batch)
        mu = out[:, :self.act_dim]
        log_std_raw = out[:, self.act_dim:]
        log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std, log_std_raw, cache

    def act_batch(self, obs_batch: np.ndarray, mode: str = "stochastic",
                  rng: np.random.Generator | None = None) -> np.ndarray:
        """Policy-space actions in [-1, 1]^2 for a batch of observations."""
        mu, log_std, _, _ = self._policy_heads(obs_batch)
        if mode == "deterministic":
            return np.tanh(mu)
        if mode != "stochastic":
            raise ValueError(f"unknown mode {mode!r}")
        rng = self.rng if rng is None else rng
        xi = rng.standard_normal(mu.shape).astype(np.float32)
        return np.tanh(mu + np.exp(log_std) * xi)

    def sample_action(self, observation: np.ndarray, mode: str = "stochastic",
                      rng: np.random.Generator | None = None) -> Action:
        a = self.act_batch(np.asarray(observation, dtype=np.float32).reshape(1, -1),
                           mode=mode, rng=rng)[0]
        return to_env_action(a)

    def log_prob(self, obs_batch: np.ndarray, act_batch: np.ndarray) -> np.ndarray:
        """Log-density of policy-space actions strictly inside (-1, 1)."""
        a = np.asarray(act_batch, dtype=np.float64)
        if np.any(np.abs(a) >= 1.0):
            raise ContractViolation("log_prob needs actions strictly inside (-1, 1)")
        mu, log_std, _, _ = self._policy_heads(np.asarray(obs_batch, dtype=np.float32))
        u = np.arctanh(a)
        xi = (u - mu) / np.exp(log_std)
        return _tanh_log_prob(u, xi, log_std.astype(np.float64))

    # -- learning ---------------------------------------------------------------

    def update(self, buffer: ReplayBuffer) -> dict:
        """One gradient step on critics, policy and temperature; soft target update."""
        if len(buffer) < self.batch_size:
            raise ContractViolation(
                f"buffer holds {len(buffer)} transitions, need {self.batch_size}")
        obs, act, rew, next_obs, done = buffer.sample(self.batch_size, self.rng)
        n = self.batch_size
        alpha = self.alpha

        # target values from the frozen critics
        mu_n, log_std_n, _, _ = self._policy_heads(next_obs)
        xi_n = self.rng.standard_normal(mu_n.shape).astype(np.float32)
        u_n = mu_n + np.exp(log_std_n) * xi_n
        a_n = np.tanh(u_n)
        logp_n = _tanh_log_prob(u_n, xi_n, log_std_n)
        sa_n = np.concatenate([next_obs, a_n], axis=1)
        q_next = np.minimum(self.q1_target(sa_n)[:, 0], self.q2_target(sa_n)[:, 0])
        y = rew + self.gamma * (1.0 - done) * (q_next - alpha * logp_n)
        y = y.astype(np.float32)

        sa = np.concatenate([obs, act], axis=1)
        losses = []
        for q, opt in ((self.q1, self.opt_q1), (self.q2, self.opt_q2)):
            pred, cache = q.forward(sa)
            err = pred[:, 0] - y
            losses.append(float(np.mean(err * err)))
            grads, _ = q.backward(cache, (2.0 / n) * err[:, None])
            adam_step(q.parameters(), grads, opt)

        # policy step: L = mean(alpha * log pi - min(Q1, Q2)) by reparameterization
        mu, log_std, log_std_raw, cache_pi = self._policy_heads(obs)
        xi = self.rng.standard_normal(mu.shape).astype(np.float32)
        sigma = np.exp(log_std)
        u = mu + sigma * xi
        a_pi = np.tanh(u)
        logp = _tanh_log_prob(u, xi, log_std)
        sa_pi = np.concatenate([obs, a_pi], axis=1)
        q1_pi, cache_q1 = self.q1.forward(sa_pi)
        q2_pi, cache_q2 = self.q2.forward(sa_pi)
        take_q1 = q1_pi[:, 0] <= q2_pi[:, 0]
        policy_loss = float(np.mean(alpha * logp - np.where(take_q1, q1_pi[:, 0], q2_pi[:, 0])))

        d_q = np.where(take_q1, -1.0 / n, 0.0).astype(np.float32)[:, None]
        _, din1 = self.q1.backward(cache_q1, d_q)
        _, din2 = self.q2.backward(cache_q2, (-1.0 / n) - d_q)
        da = (din1 + din2)[:, self.obs_dim:]

        tanh_u = a_pi
        d_mu = (alpha / n) * 2.0 * tanh_u + da * (1.0 - tanh_u * tanh_u)
        d_log_std = -alpha / n + d_mu * sigma * xi
        d_log_std = np.where((log_std_raw > LOG_STD_MIN) & (log_std_raw < LOG_STD_MAX),
                             d_log_std, 0.0)
        d_out = np.concatenate([d_mu, d_log_std], axis=1).astype(np.float32)
        grads_pi, _ = self.policy.backward(cache_pi, d_out)
        adam_step(self.policy.parameters(), grads_pi, self.opt_policy)

        # temperature: d/d(log alpha) of -log_alpha * mean(log pi + target_entropy)
        grad_log_alpha = np.asarray(-np.mean(logp + self.target_entropy), dtype=np.float32)
        adam_step([self.log_alpha], [grad_log_alpha], self.opt_alpha)

        soft_update(self.q1_target, self.q1, self.tau)
        soft_update(self.q2_target, self.q2, self.tau)

        return {
            "critic1_loss": losses[0],
            "critic2_loss": losses[1],
            "policy_loss": policy_loss,
            "alpha": self.alpha,
            "entropy": float(-np.mean(logp)),
            "q_mean": float(np.mean(q1_pi)),
            "buffer_size": len(buffer),
        }

    # -- persistence ------------------------------------------------------------

    def save(self, path, layout_hash: int) -> None:
        networks = {
            "policy": self.policy, "q1": self.q1, "q2": self.q2,
            "q1_target": self.q1_target, "q2_target": self.q2_target,
        }
        adam_states = {
            "policy": self.opt_policy, "q1": self.opt_q1, "q2": self.opt_q2,
            "alpha": self.opt_alpha,
        }
        scalars = {
            "log_alpha": float(self.log_alpha),
            "gamma": self.gamma, "tau": self.tau,
            "batch_size": self.batch_size, "target_entropy": self.target_entropy,
            "obs_dim": self.obs_dim, "act_dim": self.act_dim,
            "lr": self.opt_policy.lr,
        }
        save_checkpoint(path, networks, adam_states, scalars, layout_hash)

    @classmethod
    def load(cls, path):
        """Returns (agent, layout_hash)."""
        networks, adam_states, scalars, layout_hash = load_checkpoint(path)
        obs_dim = int(scalars["obs_dim"])
        act_dim = int(scalars["act_dim"])
        hidden = tuple(networks["policy"].sizes[1:-1])
        agent = cls(obs_dim=obs_dim, act_dim=act_dim, hidden=hidden,
                    lr=scalars["lr"], gamma=scalars["gamma"], tau=scalars["tau"],
                    batch_size=int(scalars["batch_size"]),
                    target_entropy=scalars["target_entropy"])
        agent.policy = networks["policy"]
        agent.q1 = networks["q1"]
        agent.q2 = networks["q2"]
        agent.q1_target = networks["q1_target"]
        agent.q2_target = networks["q2_target"]
        agent.log_alpha = np.asarray(scalars["log_alpha"], dtype=np.float32).reshape(())
        agent.opt_policy = adam_states["policy"]
        agent.opt_q1 = adam_states["q1"]
        agent.opt_q2 = adam_states["q2"]
        agent.opt_alpha = adam_states["alpha"]
        return agent, layout_hash
