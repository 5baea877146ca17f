"""Training algorithms: behavior cloning, the random-search coordinator,
and the parallel rollout engine.

The coordinator owns the policy weights, the discriminator, the state
normalizer and the noise schedule. Workers are stateless: each rollout
task carries its own seed and search direction and reads an immutable
per-iteration snapshot, so results are bit-identical for any worker
count.
"""

import multiprocessing as mp
import time
import traceback
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .discriminator import (DiscriminatorParams, LabeledBatch, OptimizerState,
                            adam_step, loss_and_grad, one_hot_inputs,
                            trajectory_reward)
from .errors import DomainError, EngineError, RailError, TrainingHalted
from .highway import (HighwayConfig, NUM_ACTIONS, Trajectory, episode_seed,
                      run_episode, run_params_episode)
from .policy import (NoiseDirection, NoiseSchedule, NormalizerState,
                     PolicyParams, noise_schedule_step, normalizer_update,
                     perturb, sample_directions)

DISC_HIDDEN = 64
DISC_LEARNING_RATE = 1e-3
DISC_MINIBATCH = 128  # balanced: half expert, half policy

# sub-stream tags for deriving independent per-iteration generators
_TAG_DIRECTIONS = 1
_TAG_DISC = 2
_TAG_DISC_INIT = 3


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for a tagged sub-stream of the run seed."""
    return np.random.default_rng(
        np.random.PCG64(np.random.SeedSequence((seed,) + tags)))


def task_seed(run_seed: int, iteration: int, k: int, sign: int) -> int:
    """Stable per-task episode seed: hash of (run seed, iteration, k, sign)."""
    ss = np.random.SeedSequence(
        (run_seed, iteration, k, 1 if sign > 0 else 0))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class DemonstrationSet:
    """Expert episodes with their recorded dimensions."""

    episodes: List[Trajectory]
    n: int
    p: int
    source: str = ""

    def __post_init__(self):
        if not self.episodes:
            raise DomainError("demonstration set must contain >= 1 episode")
        for traj in self.episodes:
            if traj.observations.shape[1] != self.n:
                raise DomainError("demonstration observation length mismatch")
            if np.any(traj.actions < 0) or np.any(traj.actions >= self.p):
                raise DomainError("demonstration action id out of range")

    def stacked(self):
        states = np.concatenate([t.observations for t in self.episodes])
        actions = np.concatenate([t.actions for t in self.episodes])
        return states, actions


@dataclass(frozen=True)
class RailConfig:
    """Hyperparameters of the random-search update loop."""

    step_size: float = 0.001     # update scale applied per iteration
    directions: int = 512        # sampled search directions per iteration
    nu_init: float = 0.03        # initial perturbation std
    tau: float = 0.001           # noise increment on stagnation
    eval_period: int = 10        # iterations between schedule checks
    iterations: int = 100
    workers: int = 1
    seed: int = 0
    sigma_floor: float = 1e-8    # lower bound on the reward-std divisor

    def validate(self):
        if self.step_size <= 0:
            raise DomainError("step_size must be > 0")
        if self.directions < 1:
            raise DomainError("directions must be >= 1")
        if self.nu_init <= 0:
            raise DomainError("nu_init must be > 0")
        if self.tau < 0:
            raise DomainError("tau must be >= 0")
        if self.eval_period < 1:
            raise DomainError("eval_period must be >= 1")
        if self.iterations < 1:
            raise DomainError("iterations must be >= 1")
        if self.workers < 1:
            raise DomainError("workers must be >= 1")
        if self.seed < 0:
            raise DomainError("seed must be >= 0")
        if self.sigma_floor <= 0:
            raise DomainError("sigma_floor must be > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "RailConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"unknown rail config key(s): {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    mean_reward: float
    max_reward: float
    sigma_r: float
    disc_loss: float
    nu: float
    seconds: float

    CSV_HEADER = "iter,mean_reward,max_reward,sigma_r,disc_loss,nu,seconds"

    def csv_row(self) -> str:
        return ",".join([str(self.iteration)] + [repr(float(v)) for v in (
            self.mean_reward, self.max_reward, self.sigma_r,
            self.disc_loss, self.nu, self.seconds)])


@dataclass(frozen=True)
class RolloutTask:
    k: int
    sign: int
    snapshot_id: int
    seed: int
    direction: Optional[NoiseDirection] = None


@dataclass(frozen=True)
class RolloutResult:
    k: int
    sign: int
    trajectory: Optional[Trajectory]
    reward: float


@dataclass(frozen=True)
class RolloutSnapshot:
    """Immutable per-iteration context shared by every rollout task."""

    snapshot_id: int
    params: PolicyParams
    mu: np.ndarray
    inv_sigma: np.ndarray
    disc: Optional[DiscriminatorParams]
    nu: float


def _execute_task(env_config: HighwayConfig, snapshot: RolloutSnapshot,
                  task: RolloutTask) -> RolloutResult:
    if task.direction is None:
        raise DomainError(f"task (k={task.k}, sign={task.sign:+d}) carries no direction")
    perturbed = perturb(snapshot.params, task.direction, snapshot.nu, task.sign)
    traj = run_params_episode(perturbed, snapshot.mu, snapshot.inv_sigma,
                              env_config, task.seed)
    reward = 0.0
    if snapshot.disc is not None and len(traj):
        reward = trajectory_reward(snapshot.disc, traj, snapshot.params.p)
    return RolloutResult(task.k, task.sign, traj, reward)


def _worker_main(worker_id, env_config, inbox, outbox):
    while True:
        message = inbox.get()
        if message is None:
            break
        snapshot, chunk = message
        results = []
        try:
            for task in chunk:
                results.append(_execute_task(env_config, snapshot, task))
            outbox.put(("ok", worker_id, results))
        except Exception:
            failed = chunk[len(results)]
            outbox.put(("err", worker_id, failed.k, failed.sign,
                        traceback.format_exc()))


def _warm_kernels():
    """Compile the jitted episode path before forking workers."""
    cfg = HighwayConfig(lane_count=2, road_length=500.0, ray_count=4,
                        frame_stack=1, traffic_density=2.0, episode_horizon=2)
    params = PolicyParams.zeros("linear", cfg.observation_dim, p=NUM_ACTIONS)
    run_params_episode(params, np.zeros(params.n), np.ones(params.n), cfg, 0)


class RolloutEngine:
    """Pool of stateless workers executing seeded rollout tasks.

    Worker processes are forked once and fed one (snapshot, chunk)
    message per iteration; chunks are assigned round-robin. With a
    single worker everything runs in-process.
    """

    def __init__(self, env_config: HighwayConfig, workers: int = 1):
        if workers < 1:
            raise DomainError("workers must be >= 1")
        self.env_config = env_config
        self.workers = workers
        self._procs = []
        self._inboxes = []
        self._outbox = None
        self._closed = False
        _warm_kernels()
        if workers > 1:
            ctx = mp.get_context("fork")
            self._outbox = ctx.SimpleQueue()
            for wid in range(workers):
                inbox = ctx.SimpleQueue()
                proc = ctx.Process(target=_worker_main,
                                   args=(wid, env_config, inbox, self._outbox),
                                   daemon=True)
                proc.start()
                self._procs.append(proc)
                self._inboxes.append(inbox)

    def run(self, snapshot: RolloutSnapshot,
            tasks: Sequence[RolloutTask]) -> List[RolloutResult]:
        if self._closed:
            raise EngineError("rollout engine already closed")
        if not tasks:
            raise DomainError("rollout engine needs at least one task")
        keys = {(t.k, t.sign) for t in tasks}
        if len(keys) != len(tasks):
            raise DomainError("rollout tasks carry duplicate (k, sign) keys")
        if self.workers == 1:
            results = []
            for t in tasks:
                try:
                    results.append(_execute_task(self.env_config, snapshot, t))
                except Exception as exc:
                    raise EngineError(
                        f"rollout task (k={t.k}, sign={t.sign:+d}) failed: {exc}",
                        direction=t.k, sign=t.sign) from exc
        else:
            chunks = [list(tasks[w::self.workers]) for w in range(self.workers)]
            sent = 0
            for inbox, chunk in zip(self._inboxes, chunks):
                if chunk:
                    inbox.put((snapshot, chunk))
                    sent += 1
            results = []
            failure = None
            for _ in range(sent):
                message = self._outbox.get()
                if message[0] == "ok":
                    results.extend(message[2])
                elif failure is None:
                    failure = message
            if failure is not None:
                _, _, k, sign, tb = failure
                self.close(terminate=True)
                raise EngineError(
                    f"rollout task (k={k}, sign={sign:+d}) failed:\n{tb}",
                    direction=k, sign=sign)
        results.sort(key=lambda r: (r.k, r.sign))
        return results

    def close(self, terminate: bool = False):
        if self._closed:
            return
        self._closed = True
        for proc, inbox in zip(self._procs, self._inboxes):
            if terminate:
                proc.terminate()
            else:
                inbox.put(None)
        for proc in self._procs:
            proc.join(timeout=10)
            if proc.is_alive():
                proc.terminate()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def rollout_engine_run(env_config: HighwayConfig, snapshot: RolloutSnapshot,
                       tasks: Sequence[RolloutTask],
                       workers: int) -> List[RolloutResult]:
    """One-shot engine run; results sorted by (k, sign), any worker count."""
    with RolloutEngine(env_config, workers) as engine:
        return engine.run(snapshot, tasks)


def compute_update(params: PolicyParams, directions: Sequence[NoiseDirection],
                   results: Sequence[RolloutResult], step_size: float,
                   sigma_floor: float) -> PolicyParams:
    """Pure random-search update.

    theta' = theta + step_size / (N * max(sigma_R, floor)) *
             sum_k (r_plus_k - r_minus_k) * direction_k
    with sigma_R the population std of all 2N rewards.
    """
    n_dirs = len(directions)
    r_plus = np.zeros(n_dirs)
    r_minus = np.zeros(n_dirs)
    seen_plus = np.zeros(n_dirs, dtype=bool)
    seen_minus = np.zeros(n_dirs, dtype=bool)
    for r in results:
        if not 0 <= r.k < n_dirs:
            raise DomainError(f"result direction index {r.k} out of range")
        if r.sign == 1:
            if seen_plus[r.k]:
                raise DomainError(f"duplicate result for (k={r.k}, +1)")
            r_plus[r.k] = r.reward
            seen_plus[r.k] = True
        elif r.sign == -1:
            if seen_minus[r.k]:
                raise DomainError(f"duplicate result for (k={r.k}, -1)")
            r_minus[r.k] = r.reward
            seen_minus[r.k] = True
        else:
            raise DomainError(f"result sign must be +-1, got {r.sign}")
    if not (seen_plus.all() and seen_minus.all()):
        missing = [(int(k), s) for s, seen in ((1, seen_plus), (-1, seen_minus))
                   for k in np.nonzero(~seen)[0]]
        raise DomainError(f"missing rollout results for {missing[:4]}")
    sigma = float(np.std(np.concatenate([r_plus, r_minus])))
    scale = step_size / (n_dirs * max(sigma, sigma_floor))
    coeff = (r_plus - r_minus) * scale
    new_mats = []
    for layer, stack in zip(params.matrices(),
                            zip(*[d.matrices() for d in directions])):
        new_mats.append(layer + np.tensordot(coeff, np.stack(stack), axes=1))
    return params.with_matrices(new_mats)


def record_demonstrations(env_config: HighwayConfig, expert: Callable,
                          episodes: int, seed: int) -> DemonstrationSet:
    """Run the expert and keep collision-free episodes.

    An episode that ends in a collision is dropped and replaced by the
    next sub-seed so the demonstration set never teaches crashing.
    """
    if episodes < 1:
        raise DomainError("episodes must be >= 1")
    env_config.validate()
    collected = []
    attempt = 0
    budget = 20 * episodes + 100
    while len(collected) < episodes:
        if attempt >= budget:
            raise RailError(
                "expert kept crashing; could not collect enough "
                "collision-free demonstration episodes")
        traj = run_episode(expert, env_config, episode_seed(seed, attempt))
        attempt += 1
        if traj.collided:
            continue
        collected.append(traj)
    return DemonstrationSet(collected, env_config.observation_dim,
                            NUM_ACTIONS,
                            source=getattr(expert, "__name__", "expert"))


def _one_hot_targets(actions: np.ndarray, p: int) -> np.ndarray:
    out = np.zeros((actions.shape[0], p))
    out[np.arange(actions.shape[0]), actions] = 1.0
    return out


def bc_train(demos: DemonstrationSet, kind: str = "two_layer",
             hidden: int = 10, epochs: int = 2000, seed: int = 0,
             learning_rate: float = 0.01, weight_decay: float = 1e-3,
             on_epoch: Optional[Callable] = None):
    """Behavior cloning: squared error between one-hot expert actions and
    policy logits, minimized by full-batch adaptive-moment descent with
    decoupled weight decay (the demonstration sets are small enough for an
    unregularized net to memorize them).

    Returns (PolicyParams, NormalizerState); the normalizer is fit on all
    demonstration states.
    """
    if epochs < 0:
        raise DomainError("epochs must be >= 0")
    states, actions = demos.stacked()
    norm = normalizer_update(NormalizerState.identity(demos.n), states)
    x = norm.whiten(states)
    y = _one_hot_targets(actions, demos.p)
    rng = derive_rng(seed)
    params = PolicyParams.random_init(kind, demos.n, hidden, demos.p, rng)
    mats = [m.copy() for m in params.matrices()]
    opt = OptimizerState(m=[np.zeros_like(m) for m in mats],
                         v=[np.zeros_like(m) for m in mats],
                         learning_rate=learning_rate)
    batch = x.shape[0]
    decay = 1.0 - learning_rate * weight_decay
    for epoch in range(epochs):
        if kind == "linear":
            logits = x @ mats[0].T
            g = 2.0 * (logits - y) / batch
            grads = [g.T @ x]
        else:
            hid = np.tanh(x @ mats[0].T)
            logits = hid @ mats[1].T
            g = 2.0 * (logits - y) / batch
            dhid = (g @ mats[1]) * (1.0 - hid ** 2)
            grads = [dhid.T @ x, g.T @ hid]
        mats, opt = adam_step(mats, grads, opt)
        if weight_decay:
            mats = [m * decay for m in mats]
        if on_epoch is not None:
            loss = float(np.mean(np.sum((logits - y) ** 2, axis=1)))
            on_epoch(epoch, loss)
    return params.with_matrices(mats), norm


def bc_accuracy(params: PolicyParams, norm: NormalizerState,
                episodes: Sequence[Trajectory]) -> float:
    """Fraction of recorded expert actions the policy reproduces."""
    from .policy import policy_act

    total = 0
    agree = 0
    mu, inv_sigma = norm.transform()
    for traj in episodes:
        white = (traj.observations - mu) * inv_sigma
        if params.kind == "linear":
            logits = white @ params.w_in.T
        else:
            logits = np.tanh(white @ params.w_in.T) @ params.w_out.T
        agree += int(np.sum(np.argmax(logits, axis=1) == traj.actions))
        total += len(traj)
    return agree / total if total else 0.0


def _disc_pass(disc, opt, expert_inputs, policy_inputs, rng):
    """One balanced-minibatch pass over the iteration's fresh rollout data."""
    count = policy_inputs.shape[0]
    expert_sel = expert_inputs[rng.integers(0, expert_inputs.shape[0],
                                            size=count)]
    order = rng.permutation(count)
    half = DISC_MINIBATCH // 2
    losses = []
    for start in range(0, count, half):
        rows = order[start:start + half]
        policy_batch = LabeledBatch(policy_inputs[rows], np.zeros(len(rows)))
        expert_batch = LabeledBatch(expert_sel[start:start + len(rows)],
                                    np.ones(len(rows)))
        loss, grads = loss_and_grad(disc, expert_batch, policy_batch)
        values, opt = adam_step(disc.arrays(), grads.arrays(), opt)
        disc = DiscriminatorParams(values[0], values[1], values[2],
                                   float(values[3][0]))
        losses.append(loss)
    return disc, opt, float(np.mean(losses))


@dataclass
class RailTrainState:
    """Mutable snapshot handed to the per-iteration callback."""

    params: PolicyParams
    normalizer: NormalizerState
    disc: Optional[DiscriminatorParams]
    schedule: NoiseSchedule


def rail_train(env_config: Optional[HighwayConfig],
               demos: Optional[DemonstrationSet],
               rail: RailConfig,
               init: Optional[PolicyParams] = None,
               *,
               init_normalizer: Optional[NormalizerState] = None,
               init_disc: Optional[DiscriminatorParams] = None,
               init_schedule: Optional[NoiseSchedule] = None,
               start_iteration: int = 0,
               kind: str = "two_layer",
               hidden: int = 10,
               rollout_fn: Optional[Callable] = None,
               on_iteration: Optional[Callable] = None):
    """Adversarial random-search training loop.

    Per iteration: sample directions, roll 2N perturbed policies against a
    frozen discriminator snapshot, run one discriminator pass over the
    fresh data, apply the sigma-scaled update, fold the visited states
    into the normalizer, and step the noise schedule on the mean reward.

    ``rollout_fn(perturbed_params, task) -> reward`` replaces the
    environment and discriminator entirely (test seam for synthetic
    objectives). Returns (params, normalizer, disc, [IterationReport]).
    """
    rail.validate()
    p = NUM_ACTIONS
    if rollout_fn is None:
        if env_config is None:
            raise DomainError("rail_train requires an environment config")
        env_config.validate()
        n = env_config.observation_dim
        if demos is None:
            raise DomainError(
                "rail_train requires demonstrations for the discriminator")
        if demos.n != n:
            raise DomainError(
                f"demonstrations have n={demos.n}, environment expects {n}")
    else:
        if init is None:
            raise DomainError("rollout_fn mode requires explicit init params")
        n = init.n

    params = init if init is not None else PolicyParams.zeros(kind, n, hidden, p)
    if params.n != n:
        raise DomainError(f"init policy has n={params.n}, expected {n}")
    norm = init_normalizer if init_normalizer is not None \
        else NormalizerState.identity(n)
    if norm.n != n:
        raise DomainError("init normalizer dimension mismatch")

    disc = init_disc
    opt = None
    expert_inputs = None
    if rollout_fn is None:
        if disc is None:
            disc = DiscriminatorParams.random_init(
                n + p, DISC_HIDDEN, derive_rng(rail.seed, _TAG_DISC_INIT))
        opt = OptimizerState.for_params(disc, DISC_LEARNING_RATE)
        expert_states, expert_actions = demos.stacked()
        expert_inputs = one_hot_inputs(expert_states, expert_actions, p)

    sched = init_schedule if init_schedule is not None else NoiseSchedule(
        nu=rail.nu_init, nu_init=rail.nu_init, tau=rail.tau,
        eval_period=rail.eval_period)

    engine = None
    reports: List[IterationReport] = []
    try:
        if rollout_fn is None:
            engine = RolloutEngine(env_config, rail.workers)
        for t in range(start_iteration + 1, rail.iterations + 1):
            t_start = time.perf_counter()
            directions = sample_directions(
                derive_rng(rail.seed, _TAG_DIRECTIONS, t),
                rail.directions, params)
            mu, inv_sigma = norm.transform()
            snapshot = RolloutSnapshot(t, params, mu, inv_sigma, disc, sched.nu)
            tasks = [RolloutTask(k, sign, t, task_seed(rail.seed, t, k, sign),
                                 directions[k])
                     for k in range(rail.directions) for sign in (1, -1)]
            if rollout_fn is not None:
                results = []
                for task in tasks:
                    perturbed = perturb(params, task.direction, sched.nu,
                                        task.sign)
                    results.append(RolloutResult(
                        task.k, task.sign, None,
                        float(rollout_fn(perturbed, task))))
                results.sort(key=lambda r: (r.k, r.sign))
            else:
                results = engine.run(snapshot, tasks)

            rewards = np.array([r.reward for r in results])
            if not np.all(np.isfinite(rewards)):
                bad = results[int(np.argmax(~np.isfinite(rewards)))]
                raise TrainingHalted(
                    f"non-finite rollout reward at iteration {t} "
                    f"(k={bad.k}, sign={bad.sign:+d})",
                    dump={
                        "iteration": t,
                        "k": bad.k,
                        "sign": bad.sign,
                        "nu": sched.nu,
                        "rewards_finite": int(np.sum(np.isfinite(rewards))),
                        "param_norm": float(sum(np.sum(m * m)
                                                for m in params.matrices())),
                    })

            disc_loss = 0.0
            if rollout_fn is None:
                policy_inputs = one_hot_inputs(
                    np.concatenate([r.trajectory.observations for r in results]),
                    np.concatenate([r.trajectory.actions for r in results]), p)
                disc, opt, disc_loss = _disc_pass(
                    disc, opt, expert_inputs, policy_inputs,
                    derive_rng(rail.seed, _TAG_DISC, t))

            params = compute_update(params, directions, results,
                                    rail.step_size, rail.sigma_floor)

            if rollout_fn is None:
                for r in results:  # already sorted by (k, sign)
                    norm = normalizer_update(norm, r.trajectory.observations)

            metric = float(np.mean(rewards))
            nu_used = sched.nu
            sched = noise_schedule_step(sched, t, metric)

            report = IterationReport(
                iteration=t,
                mean_reward=metric,
                max_reward=float(np.max(rewards)),
                sigma_r=float(np.std(rewards)),
                disc_loss=disc_loss,
                nu=nu_used,
                seconds=time.perf_counter() - t_start,
            )
            reports.append(report)
            if on_iteration is not None:
                on_iteration(report, RailTrainState(params, norm, disc, sched))
    finally:
        if engine is not None:
            engine.close()
    return params, norm, disc, reports
