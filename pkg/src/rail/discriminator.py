"""Binary transition classifier with a least-squares objective.

The discriminator scores state-action pairs with a one-hidden-layer tanh
network and a sigmoid output. Training minimizes the least-squares loss
0.5*E_expert[(D-1)^2] + 0.5*E_policy[(D-0)^2] with hand-derived reverse-mode
gradients; the imitation reward handed to the policy search is
log(D) - log(1-D) of the clamped output.
"""

from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from .errors import DomainError
from .highway import Trajectory

OUTPUT_CLAMP = 1e-6  # keeps log(D) and log(1-D) finite
EXPERT_LABEL = 1.0
POLICY_LABEL = 0.0


@dataclass(frozen=True)
class DiscriminatorParams:
    """Weights of the classifier: tanh hidden layer, sigmoid output."""

    w1: np.ndarray  # (m, n + p)
    b1: np.ndarray  # (m,)
    w2: np.ndarray  # (m,)
    b2: float

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> List[np.ndarray]:
        return [self.w1, self.b1, self.w2, np.asarray([self.b2])]

    @classmethod
    def random_init(cls, input_dim: int, hidden: int,
                    rng: np.random.Generator) -> "DiscriminatorParams":
        scale = 1.0 / np.sqrt(input_dim)
        return cls(
            w1=rng.standard_normal((hidden, input_dim)) * scale,
            b1=np.zeros(hidden),
            w2=rng.standard_normal(hidden) / np.sqrt(hidden),
            b2=0.0,
        )

    @classmethod
    def zeros(cls, input_dim: int, hidden: int) -> "DiscriminatorParams":
        return cls(np.zeros((hidden, input_dim)), np.zeros(hidden),
                   np.zeros(hidden), 0.0)


@dataclass(frozen=True)
class LabeledBatch:
    """Inputs (B x (n+p)) of state ++ one-hot(action) with {0,1} labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise DomainError("batch inputs must be a nonempty 2-D array")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DomainError("labels must match the batch size")
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise DomainError("labels must be 0 or 1")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def one_hot_inputs(states: np.ndarray, actions: np.ndarray, p: int) -> np.ndarray:
    """Concatenate states with one-hot action encodings."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
    if np.any(actions < 0) or np.any(actions >= p):
        raise DomainError(f"action id outside [0, {p - 1}]")
    onehot = np.zeros((states.shape[0], p))
    onehot[np.arange(states.shape[0]), actions] = 1.0
    return np.concatenate([states, onehot], axis=1)


def labeled_batch(states, actions, p: int, label: float) -> LabeledBatch:
    inputs = one_hot_inputs(states, actions, p)
    return LabeledBatch(inputs, np.full(inputs.shape[0], float(label)))


def _forward_batch(phi: DiscriminatorParams, inputs: np.ndarray):
    """Returns (clamped outputs, raw sigmoid, hidden activations)."""
    z1 = inputs @ phi.w1.T + phi.b1
    h = np.tanh(z1)
    z2 = h @ phi.w2 + phi.b2
    # |z2| > 60 saturates far past the output clamp; capping avoids exp overflow
    d_raw = 1.0 / (1.0 + np.exp(-np.clip(z2, -60.0, 60.0)))
    d = np.clip(d_raw, OUTPUT_CLAMP, 1.0 - OUTPUT_CLAMP)
    return d, d_raw, h


def disc_forward(phi: DiscriminatorParams, state: np.ndarray,
                 action: int, p: int = 5) -> float:
    """Clamped classifier output in (0, 1) for one state-action pair."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape[0] + p != phi.input_dim:
        raise DomainError(
            f"state length {state.shape[0]} + p={p} does not match "
            f"discriminator input width {phi.input_dim}")
    x = one_hot_inputs(state[None, :], [action], p)
    d, _, _ = _forward_batch(phi, x)
    return float(d[0])


def lsgan_loss(phi: DiscriminatorParams, expert_batch: LabeledBatch,
               policy_batch: LabeledBatch) -> float:
    """0.5*mean[(D - label)^2] per side, summed over both batches."""
    d_e, _, _ = _forward_batch(phi, expert_batch.inputs)
    d_p, _, _ = _forward_batch(phi, policy_batch.inputs)
    return float(0.5 * np.mean((d_e - expert_batch.labels) ** 2)
                 + 0.5 * np.mean((d_p - policy_batch.labels) ** 2))


@dataclass(frozen=True)
class DiscGradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def arrays(self) -> List[np.ndarray]:
        return [self.w1, self.b1, self.w2, np.asarray([self.b2])]

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))


def _side_loss_grad(phi, inputs, labels):
    d, d_raw, h = _forward_batch(phi, inputs)
    batch = inputs.shape[0]
    loss = 0.5 * float(np.mean((d - labels) ** 2))
    # d(0.5 * mean (d - y)^2)/dd, clamp treated as identity strictly inside
    dl_dd = (d - labels) / batch
    inside = (d_raw > OUTPUT_CLAMP) & (d_raw < 1.0 - OUTPUT_CLAMP)
    dz2 = dl_dd * d_raw * (1.0 - d_raw) * inside
    gw2 = h.T @ dz2
    gb2 = float(np.sum(dz2))
    dh = np.outer(dz2, phi.w2)
    dz1 = dh * (1.0 - h ** 2)
    gw1 = dz1.T @ inputs
    gb1 = dz1.sum(axis=0)
    return loss, gw1, gb1, gw2, gb2


def loss_and_grad(phi: DiscriminatorParams, expert_batch: LabeledBatch,
                  policy_batch: LabeledBatch):
    """lsgan_loss and its analytic gradient from a single forward pass."""
    el, ew1, eb1, ew2, eb2 = _side_loss_grad(phi, expert_batch.inputs,
                                             expert_batch.labels)
    pl, pw1, pb1, pw2, pb2 = _side_loss_grad(phi, policy_batch.inputs,
                                             policy_batch.labels)
    return el + pl, DiscGradients(ew1 + pw1, eb1 + pb1, ew2 + pw2, eb2 + pb2)


def disc_grad(phi: DiscriminatorParams, expert_batch: LabeledBatch,
              policy_batch: LabeledBatch) -> DiscGradients:
    """Exact analytic gradient of lsgan_loss with respect to phi."""
    return loss_and_grad(phi, expert_batch, policy_batch)[1]


@dataclass(frozen=True)
class OptimizerState:
    """Adaptive-moment accumulators paired with one DiscriminatorParams."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, phi: DiscriminatorParams,
                   learning_rate: float = 1e-3) -> "OptimizerState":
        shapes = [a.shape for a in phi.arrays()]
        return cls(m=[np.zeros(s) for s in shapes],
                   v=[np.zeros(s) for s in shapes],
                   learning_rate=learning_rate)


def adam_step(values: List[np.ndarray], grads: List[np.ndarray],
              opt: OptimizerState) -> Tuple[List[np.ndarray], OptimizerState]:
    """One bias-corrected adaptive-moment step over a list of arrays."""
    step = opt.step + 1
    new_m, new_v, new_values = [], [], []
    for x, g, m, v in zip(values, grads, opt.m, opt.v):
        m = opt.beta1 * m + (1 - opt.beta1) * g
        v = opt.beta2 * v + (1 - opt.beta2) * g * g
        m_hat = m / (1 - opt.beta1 ** step)
        v_hat = v / (1 - opt.beta2 ** step)
        new_values.append(x - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps))
        new_m.append(m)
        new_v.append(v)
    return new_values, replace(opt, m=new_m, v=new_v, step=step)


def disc_update(phi: DiscriminatorParams, opt: OptimizerState,
                expert_batch: LabeledBatch, policy_batch: LabeledBatch):
    """One adaptive-moment step on lsgan_loss; returns (phi', opt')."""
    _, grads = loss_and_grad(phi, expert_batch, policy_batch)
    values, opt = adam_step(phi.arrays(), grads.arrays(), opt)
    phi = DiscriminatorParams(values[0], values[1], values[2],
                              float(values[3][0]))
    return phi, opt


def reward_signal(phi: DiscriminatorParams, state: np.ndarray, action: int,
                  p: int = 5) -> float:
    """log(D) - log(1 - D) of the clamped classifier output."""
    d = disc_forward(phi, state, action, p)
    return float(np.log(d) - np.log(1.0 - d))


def batch_rewards(phi: DiscriminatorParams, inputs: np.ndarray) -> np.ndarray:
    d, _, _ = _forward_batch(phi, inputs)
    return np.log(d) - np.log(1.0 - d)


def trajectory_reward(phi: DiscriminatorParams, traj: Trajectory,
                      p: int = 5) -> float:
    """Undiscounted sum of per-step rewards along one trajectory."""
    if len(traj) == 0:
        raise DomainError("trajectory must contain at least one step")
    inputs = one_hot_inputs(traj.observations, traj.actions, p)
    return float(np.sum(batch_rewards(phi, inputs)))
