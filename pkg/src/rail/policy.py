"""Policy parameterizations, parameter-space noise, and state normalization.

Policies are linear (actions x n) or two-layer (tanh hidden layer). Action
selection is a deterministic argmax over logits computed on the whitened
state; ties resolve to the lowest action id.
"""

from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from . import _kernels as K
from .errors import DomainError

VARIANCE_FLOOR = 1e-8  # std floor applied when whitening


@dataclass(frozen=True)
class PolicyParams:
    """Weights of a linear or two-layer policy.

    ``w_in`` is (p x n) for linear policies and (h x n) for two-layer
    policies; ``w_out`` is (p x h) and only present for two-layer.
    Treat instances as immutable values.
    """

    kind: str
    w_in: np.ndarray
    w_out: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("linear", "two_layer"):
            raise DomainError(f"unknown policy kind {self.kind!r}")
        if self.kind == "two_layer" and self.w_out is None:
            raise DomainError("two_layer policy requires w_out")
        if self.kind == "linear" and self.w_out is not None:
            raise DomainError("linear policy takes no w_out")
        object.__setattr__(self, "w_in", np.ascontiguousarray(self.w_in, dtype=np.float64))
        if self.w_out is not None:
            object.__setattr__(self, "w_out", np.ascontiguousarray(self.w_out, dtype=np.float64))
            if self.w_out.shape[1] != self.w_in.shape[0]:
                raise DomainError("w_out columns must match w_in rows")

    @property
    def n(self) -> int:
        return self.w_in.shape[1]

    @property
    def h(self) -> int:
        return self.w_in.shape[0] if self.kind == "two_layer" else 0

    @property
    def p(self) -> int:
        return self.w_in.shape[0] if self.kind == "linear" else self.w_out.shape[0]

    @classmethod
    def zeros(cls, kind: str, n: int, h: int = 0, p: int = 5) -> "PolicyParams":
        if kind == "linear":
            return cls(kind, np.zeros((p, n)))
        return cls(kind, np.zeros((h, n)), np.zeros((p, h)))

    @classmethod
    def random_init(cls, kind: str, n: int, h: int, p: int,
                    rng: np.random.Generator) -> "PolicyParams":
        """Small Gaussian init scaled by fan-in, for gradient training."""
        if kind == "linear":
            return cls(kind, rng.standard_normal((p, n)) / np.sqrt(n))
        return cls(kind,
                   rng.standard_normal((h, n)) / np.sqrt(n),
                   rng.standard_normal((p, h)) / np.sqrt(h))

    def matrices(self) -> List[np.ndarray]:
        if self.kind == "linear":
            return [self.w_in]
        return [self.w_in, self.w_out]

    def with_matrices(self, mats: List[np.ndarray]) -> "PolicyParams":
        if self.kind == "linear":
            return PolicyParams(self.kind, mats[0])
        return PolicyParams(self.kind, mats[0], mats[1])


@dataclass(frozen=True)
class NoiseDirection:
    """One i.i.d. standard-Gaussian search direction, shaped like its policy."""

    d_in: np.ndarray
    d_out: Optional[np.ndarray] = None

    def matrices(self) -> List[np.ndarray]:
        if self.d_out is None:
            return [self.d_in]
        return [self.d_in, self.d_out]


def sample_directions(rng: np.random.Generator, count: int,
                      like: PolicyParams) -> List[NoiseDirection]:
    """Draw ``count`` i.i.d. standard-normal directions from a seeded stream."""
    if count < 1:
        raise DomainError("direction count must be >= 1")
    out = []
    for _ in range(count):
        d_in = rng.standard_normal(like.w_in.shape)
        d_out = None
        if like.w_out is not None:
            d_out = rng.standard_normal(like.w_out.shape)
        out.append(NoiseDirection(d_in, d_out))
    return out


def perturb(params: PolicyParams, delta: NoiseDirection, nu: float,
            sign: int) -> PolicyParams:
    """Return params + sign * nu * delta without touching the inputs."""
    if delta.d_in.shape != params.w_in.shape:
        raise DomainError("direction shape does not match policy w_in")
    if (params.w_out is None) != (delta.d_out is None):
        raise DomainError("direction layer count does not match policy")
    if params.w_out is not None and delta.d_out.shape != params.w_out.shape:
        raise DomainError("direction shape does not match policy w_out")
    if sign not in (1, -1):
        raise DomainError("sign must be +1 or -1")
    w_in = params.w_in + (sign * nu) * delta.d_in
    if params.kind == "linear":
        return PolicyParams(params.kind, w_in)
    return PolicyParams(params.kind, w_in,
                        params.w_out + (sign * nu) * delta.d_out)


@dataclass(frozen=True)
class NormalizerState:
    """Streaming per-dimension mean and sum of squared deviations."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "NormalizerState":
        return cls(0, np.zeros(n), np.zeros(n))

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    def variance(self) -> np.ndarray:
        if self.count < 1:
            return np.zeros_like(self.m2)
        return self.m2 / self.count

    def transform(self):
        """(mu, inv_sigma) realizing diag(var)^(-1/2) (s - mu).

        Identity while count <= 1; the std is floored to survive constant
        dimensions.
        """
        if self.count <= 1:
            return np.zeros(self.n), np.ones(self.n)
        std = np.sqrt(self.m2 / self.count)
        return self.mean.copy(), 1.0 / np.maximum(std, VARIANCE_FLOOR)

    def whiten(self, states: np.ndarray) -> np.ndarray:
        mu, inv_sigma = self.transform()
        return (states - mu) * inv_sigma


def normalizer_update(norm: NormalizerState, states: np.ndarray) -> NormalizerState:
    """Merge one batch of state vectors into the running statistics.

    Uses the parallel (Chan) merge of two-pass batch statistics, so merging
    batch-by-batch in a fixed order matches a single concatenated update to
    floating-point accuracy regardless of scheduling.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[None, :]
    if states.shape[0] == 0:
        return norm
    if states.shape[1] != norm.n:
        raise DomainError(
            f"state length {states.shape[1]} does not match normalizer n={norm.n}")
    b_count = states.shape[0]
    b_mean = states.mean(axis=0)
    b_m2 = ((states - b_mean) ** 2).sum(axis=0)
    if norm.count == 0:
        return NormalizerState(b_count, b_mean, b_m2)
    total = norm.count + b_count
    delta = b_mean - norm.mean
    mean = norm.mean + delta * (b_count / total)
    m2 = norm.m2 + b_m2 + delta ** 2 * (norm.count * b_count / total)
    return NormalizerState(total, mean, m2)


def policy_act(params: PolicyParams, normalizer: NormalizerState,
               state: np.ndarray) -> int:
    """Whitened argmax action for one observation vector."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (params.n,):
        raise DomainError(
            f"state shape {state.shape} does not match policy n={params.n}")
    if normalizer.n != params.n:
        raise DomainError("normalizer dimension does not match policy")
    mu, inv_sigma = normalizer.transform()
    logits = np.empty(params.p)
    kind_flag = 0 if params.kind == "linear" else 1
    w_out = params.w_out if params.w_out is not None else np.zeros((1, 1))
    K.policy_logits(kind_flag, params.w_in, w_out, mu, inv_sigma,
                    np.ascontiguousarray(state), logits)
    return int(K.argmax_first(logits))


@dataclass(frozen=True)
class NoiseSchedule:
    """Exploration noise that grows on stagnation and resets on improvement."""

    nu: float = 0.03
    nu_init: float = 0.03
    tau: float = 0.001
    eval_period: int = 10
    best_metric: float = -np.inf

    def __post_init__(self):
        if self.nu_init <= 0 or self.nu < self.nu_init:
            raise DomainError("noise schedule requires nu >= nu_init > 0")
        if self.tau < 0:
            raise DomainError("tau must be >= 0")
        if self.eval_period < 1:
            raise DomainError("eval_period must be >= 1")


def noise_schedule_step(sched: NoiseSchedule, iteration: int,
                        metric: float) -> NoiseSchedule:
    """Evaluate the schedule at iteration boundaries.

    Only iterations divisible by the evaluation period are inspected;
    a metric that fails to beat the best seen grows nu by tau, an
    improvement resets nu and records the new best.
    """
    if not np.isfinite(metric):
        raise DomainError("schedule metric must be finite")
    if iteration % sched.eval_period != 0:
        return sched
    if metric <= sched.best_metric:
        return replace(sched, nu=sched.nu + sched.tau)
    return replace(sched, nu=sched.nu_init, best_metric=metric)
