import numpy as np
import pytest

from rail.errors import DomainError
from rail.highway import Trajectory
from rail.policy import policy_act
from rail.training import DemonstrationSet, bc_accuracy, bc_train


def demos_from_arrays(states, actions, p):
    traj = Trajectory(observations=np.asarray(states, dtype=np.float64),
                      actions=np.asarray(actions, dtype=np.int64))
    return DemonstrationSet([traj], states.shape[1], p, source="synthetic")


def test_constant_action_expert_is_cloned(rng):
    # The degenerate target: a single demo state (the normalizer stays an
    # identity below count 2, so the state reaches the net uncentered) is
    # fit exactly, and the clone reproduces the constant action on it.
    state = rng.standard_normal((1, 6)) + 2.0
    demos = demos_from_arrays(state, np.array([3]), 5)
    params, norm = bc_train(demos, "two_layer", hidden=6, epochs=500, seed=0)
    assert policy_act(params, norm, state[0]) == 3

    # With many centered states a bias-free network cannot represent a
    # constant nonzero one-hot exactly; the constant action is still the
    # modal prediction of the clone.
    states = rng.standard_normal((400, 6))
    demos3 = demos_from_arrays(states, np.full(400, 3), 5)
    params3, norm3 = bc_train(demos3, "two_layer", hidden=6, epochs=400,
                              seed=0)
    predictions = np.array([policy_act(params3, norm3, s) for s in states])
    counts = np.bincount(predictions, minlength=5)
    assert int(np.argmax(counts)) == 3


def test_linearly_separable_rule_high_holdout_accuracy(rng):
    # known linear rule with orthonormal rows (congruent class cones, so
    # the squared-loss fit shares the rule's argmax boundaries); keeping
    # only points with a clear top-1 margin makes the demos separable
    n, p = 4, 3
    rule, _ = np.linalg.qr(rng.standard_normal((n, n)))
    rule = rule[:p]
    pool = rng.standard_normal((8000, n))
    scores = pool @ rule.T
    order = np.sort(scores, axis=1)
    margin = order[:, -1] - order[:, -2]
    keep = pool[margin > 0.5][:1250]
    assert len(keep) == 1250
    actions = np.argmax(keep @ rule.T, axis=1)
    demos = demos_from_arrays(keep[:1000], actions[:1000], p)
    params, norm = bc_train(demos, "linear", epochs=1500, seed=7)
    predicted = np.array([policy_act(params, norm, s) for s in keep[1000:]])
    accuracy = float(np.mean(predicted == actions[1000:]))
    assert accuracy >= 0.99


def test_zero_epochs_returns_initialization(rng):
    states = rng.standard_normal((60, 5))
    demos = demos_from_arrays(states, rng.integers(0, 5, 60), 5)
    a_params, a_norm = bc_train(demos, "two_layer", hidden=4, epochs=0, seed=9)
    b_params, b_norm = bc_train(demos, "two_layer", hidden=4, epochs=0, seed=9)
    assert np.array_equal(a_params.w_in, b_params.w_in)
    assert np.array_equal(a_params.w_out, b_params.w_out)
    # normalizer is still fit on the demo states
    assert a_norm.count == 60
    trained, _ = bc_train(demos, "two_layer", hidden=4, epochs=50, seed=9)
    assert not np.array_equal(trained.w_in, a_params.w_in)


def test_bc_is_deterministic_per_seed(rng):
    states = rng.standard_normal((200, 5))
    demos = demos_from_arrays(states, rng.integers(0, 5, 200), 5)
    a, _ = bc_train(demos, "two_layer", hidden=5, epochs=120, seed=3)
    b, _ = bc_train(demos, "two_layer", hidden=5, epochs=120, seed=3)
    assert np.array_equal(a.w_in, b.w_in)
    assert np.array_equal(a.w_out, b.w_out)


def test_loss_reported_and_decreasing(rng):
    states = rng.standard_normal((300, 4))
    actions = np.argmax(states[:, :3], axis=1)
    demos = demos_from_arrays(states, actions, 3)
    losses = []
    bc_train(demos, "two_layer", hidden=8, epochs=300, seed=1,
             on_epoch=lambda e, loss: losses.append(loss))
    assert len(losses) == 300
    assert losses[-1] < losses[0]


def test_empty_demos_rejected():
    with pytest.raises(DomainError):
        DemonstrationSet([], 4, 5)


def test_bc_accuracy_on_training_data(tiny_demos):
    cfg, demos = tiny_demos
    params, norm = bc_train(demos, "two_layer", hidden=10, epochs=600, seed=2)
    assert bc_accuracy(params, norm, demos.episodes) > 0.8
