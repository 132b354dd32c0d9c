import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from worldenv import data, envcore, rotations
from worldenv.envcore import EnvState, GoalSpec
from worldenv.errors import ConfigurationError, ContractViolation, EnvironmentAccessError


def _state(x, obj, held=False, p=1.0, q=(0.0, 0.0, 0.0)):
    return EnvState(np.array([*x, *q, p], dtype=float), np.array(obj, dtype=float), np.array(held))


def _goal(pose, task=0):
    return GoalSpec(np.array(task), np.array(pose, dtype=float))


def test_reset_is_deterministic():
    s1, o1, g1 = envcore.reset(0, 0)
    s2, o2, g2 = envcore.reset(0, 0)
    assert np.array_equal(s1.object_pose, s2.object_pose) and np.array_equal(o1, o2)
    assert np.array_equal(g1.goal_pose, g2.goal_pose)
    assert np.array_equal(s1.proprio, envcore.HOME_PROPRIO)


def test_reset_seeds_differ():
    a, _, _ = envcore.reset(0, 0)
    b, _, _ = envcore.reset(0, 1)
    assert not np.array_equal(a.object_pose, b.object_pose)


def test_unknown_task_rejected():
    with pytest.raises(ConfigurationError):
        envcore.reset(99, 0)


def test_reset_draws_inside_task_regions():
    for task_id, task in envcore.TASKS.items():
        st_, _, g = envcore.reset_batch([task_id] * 50, list(range(50)))
        assert np.all(st_.object_pose >= task.object_low) and np.all(st_.object_pose <= task.object_high)
        assert np.all(g.goal_pose >= task.goal_low) and np.all(g.goal_pose <= task.goal_high)


def test_fk_zero_action_is_identity():
    s = np.array([0.1, -0.2, 0.3, 0.2, -0.1, 0.4, 0.7])
    a = np.array([0, 0, 0, 0, 0, 0, 0.7])
    assert np.allclose(envcore.fk(s, a), s, atol=1e-12)


def test_fk_composes_rotations_on_the_left():
    s = np.array([0, 0, 0, 0, 0, math.pi / 2, 1.0])
    q = rotations.compose(np.array([0, 0, math.pi / 2]), s[3:6])
    assert np.allclose(q, [0, 0, math.pi], atol=1e-12)
    # fk bounds the per-step rotation, so reach the same pose in small steps
    s_fk = s
    step = np.array([0, 0, 0, 0, 0, math.pi / 2 / 8, 1.0])
    for _ in range(8):
        s_fk = envcore.fk(s_fk, step)
    assert np.allclose(np.abs(s_fk[3:6]), [0, 0, math.pi], atol=1e-9)


def test_fk_clamps_workspace():
    s = np.array([0.99, 0, 0, 0, 0, 0, 1.0])
    out = envcore.fk(s, np.array([0.1, 0, 0, 0, 0, 0, 1.0]))
    assert np.allclose(out[:3], [1.0, 0, 0])


def test_fk_gripper_command_is_set_and_clamped():
    s = np.array([0, 0, 0, 0, 0, 0, 0.2])
    assert envcore.fk(s, np.array([0, 0, 0, 0, 0, 0, 1.7]))[6] == 1.0


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    st.lists(st.floats(-0.2, 0.2), min_size=3, max_size=3),
)
def test_rotation_canonical_and_idempotent(q, dq):
    s = np.array([0, 0, 0, *q, 1.0])
    out = envcore.fk(s, np.array([0, 0, 0, *dq, 1.0]))[3:6]
    assert np.linalg.norm(out) <= math.pi + 1e-9
    assert np.allclose(rotations.canonicalize(out), out, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_compose_matches_rotation_matrices(a, b):
    def mat(v):
        v = np.asarray(v, dtype=float)
        th = np.linalg.norm(v)
        if th < 1e-12:
            return np.eye(3)
        k = v / th
        K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        return np.eye(3) + math.sin(th) * K + (1 - math.cos(th)) * K @ K

    assert np.allclose(mat(rotations.compose(np.array(a), np.array(b))), mat(a) @ mat(b), atol=1e-9)


def test_grasp_when_closing_at_object():
    s = _state([0.0, 0.0, 0.0], [0.01, 0.0, 0.0], p=1.0)
    new, obs, _ = envcore.step_true(s, np.array([0, 0, 0, 0, 0, 0, 0.0]), _goal([0.5, 0, 0]))
    assert bool(new.held) and obs[envcore.OBS_HELD] == 1.0
    assert np.array_equal(new.object_pose, new.proprio[:3])


def test_no_grasp_outside_radius():
    s = _state([0.0, 0.0, 0.0], [0.06, 0.0, 0.0], p=1.0)
    new, _, _ = envcore.step_true(s, np.array([0, 0, 0, 0, 0, 0, 0.0]), _goal([0.5, 0, 0]))
    assert not bool(new.held)


def test_held_object_follows_gripper_and_release():
    s = _state([0.0, 0.0, 0.2], [0.0, 0.0, 0.2], held=True, p=0.0)
    g = _goal([0.5, 0, 0])
    new, _, _ = envcore.step_true(s, np.array([0.05, -0.02, 0.01, 0, 0, 0, 0.0]), g)
    assert np.array_equal(new.object_pose, new.proprio[:3])
    dropped, _, _ = envcore.step_true(new, np.array([0, 0, 0, 0, 0, 0, 1.0]), g)
    assert not bool(dropped.held)
    assert np.array_equal(dropped.object_pose, new.object_pose)


def test_success_is_a_state_predicate():
    g = _goal([0.4, 0.1, 0.0])
    s = _state([0.4, 0.1, 0.2], [0.4, 0.1, 0.0])
    assert bool(envcore.oracle_success(s, g))
    for _ in range(3):
        s, _, ok = envcore.step_true(s, np.array([0, 0, 0, 0, 0, 0, 1.0]), g)
        assert bool(ok)


def test_oracle_success_examples():
    g = _goal([0.4, 0.0, 0.0])
    assert bool(envcore.oracle_success(_state([0, 0, 0.3], [0.4, 0, 0]), g))
    assert not bool(envcore.oracle_success(_state([0, 0, 0.3], [0.6, 0, 0]), g))
    assert not bool(envcore.oracle_success(_state([0.4, 0, 0], [0.4, 0, 0], held=True, p=0.0), g))


def test_expert_moves_toward_object():
    s = _state([0.0, 0.0, 0.5], [-0.45, 0.1, 0.0])
    a = envcore.scripted_expert(s, _goal([0.45, 0, 0]))
    assert np.dot(a[:3], s.object_pose - s.proprio[:3]) > 0
    assert np.all(a >= envcore.ACTION_LOW) and np.all(a <= envcore.ACTION_HIGH)


def test_expert_closes_at_object():
    s = _state([-0.45, 0.1, 0.0], [-0.45, 0.1, 0.0])
    assert envcore.scripted_expert(s, _goal([0.45, 0, 0]))[6] < 0.5


def test_expert_solves_first_five_seeds():
    eps = envcore.run_episodes(envcore.expert_policy, [0] * 5, range(5), 120)
    assert all(bool(e.success[-1]) for e in eps)


def test_expert_lift_routine_undoes_success():
    ep = envcore.run_episodes(envcore.expert_policy, [2], [0], 120)[0]
    assert ep.first_success() is not None and not bool(ep.success[-1])


def test_noisy_expert_is_seeded_and_jittered():
    run = lambda: envcore.run_episodes(envcore.noisy_expert(0.01, np.random.default_rng(0)), [0], [0], 30)[0]
    a, b = run(), run()
    clean = envcore.run_episodes(envcore.expert_policy, [0], [0], 30)[0]
    assert np.array_equal(a.actions, b.actions) and not np.array_equal(a.actions, clean.actions)
    assert np.array_equal(envcore.run_episodes(envcore.noisy_expert(0.0, np.random.default_rng(0)), [0], [0], 30)[0].actions, clean.actions)


def test_held_invariant_along_expert_run():
    state, obs, goals = envcore.reset_batch([0, 1, 2], [3, 4, 5])
    for _ in range(120):
        state, obs, _ = envcore.step_true(state, envcore.scripted_expert(state, goals), goals)
        held = np.asarray(state.held, dtype=bool)
        assert np.array_equal(state.object_pose[held], state.proprio[held, :3])


def test_same_actions_reproduce_trajectory():
    rng = np.random.default_rng(0)
    acts = rng.uniform(envcore.ACTION_LOW, envcore.ACTION_HIGH, size=(40, 7))

    def run():
        state, obs, g = envcore.reset(1, 9)
        out = [obs]
        for a in acts:
            state, obs, _ = envcore.step_true(state, a, g)
            out.append(obs)
        return np.stack(out)

    assert np.array_equal(run(), run())


def test_access_guard_counts_and_forbids():
    with envcore.access_guard(forbid=False) as guard:
        envcore.reset(0, 0)
        envcore.reset_batch([0, 0], [1, 2])
    assert guard.calls == 2
    with pytest.raises(EnvironmentAccessError):
        with envcore.access_guard(forbid=True):
            envcore.reset(0, 0)


def test_trajectory_file_roundtrip(tmp_path):
    eps = envcore.run_episodes(envcore.expert_policy, [0, 1], [0, 1], 12)
    path = tmp_path / "traj.jsonl"
    data.write_episodes(path, eps, {0: {"y": [None] + eps[0].labels().tolist()}})
    back, extra = data.read_episodes(path)
    for a, b in zip(eps, back):
        assert np.array_equal(a.obs, b.obs) and np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.success, b.success) and a.seed == b.seed and a.task_id == b.task_id
    assert extra[0]["y"][1:] == eps[0].labels().tolist()
    assert '"worldenv-traj-v1"' in path.read_text().splitlines()[0]


def test_transitions_satisfy_fk():
    eps = envcore.run_episodes(envcore.expert_policy, [0], [0], 30)
    ts = data.transitions(eps)
    ts.check_fk()
    ts.proprio_next[3, 0] += 1e-9
    with pytest.raises(ContractViolation):
        ts.check_fk()


def test_wrong_schema_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"schema": "other"}\n')
    with pytest.raises(ConfigurationError):
        data.read_episodes(path)
