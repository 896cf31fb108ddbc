import dataclasses

import numpy as np
import pytest

import envs
from errors import ConfigurationError, DomainError


@pytest.fixture(scope="module")
def set_a():
    return envs.make_task_set("A", d=20, seed=0)


@pytest.fixture(scope="module")
def set_b():
    return envs.make_task_set("B", d=20, seed=0)


def run_episode(task, action_fn, seed=0):
    state = envs.reset(task, seed=seed)
    total = 0.0
    for _ in range(task.horizon):
        result = envs.step(task, state, np.clip(action_fn(state), -1.0, 1.0))
        total += result.reward
        state = result.next_state
    return total, state


class TestTaskSets:
    def test_set_a_has_four_valves_with_rank_four_span(self, set_a):
        assert set_a.names == ["valve0", "valve1", "valve2", "valve3"]
        assert all(t.kind == "valve" for t in set_a)
        assert envs.oracle_subspace(set_a.tasks).shape == (20, 4)
        assert set_a.span_dim == 4

    def test_set_b_has_seven_dimensional_span(self, set_b):
        assert [t.kind for t in set_b] == ["dice", "valve", "weight_pull", "screw"]
        assert envs.oracle_subspace(set_b.tasks).shape == (20, 7)

    def test_engagement_adds_contact_directions(self):
        tasks = envs.make_task_set("A", d=20, seed=0, engagement_on=True)
        assert envs.oracle_subspace(tasks.tasks).shape[1] == 8

    def test_same_seed_same_tasks(self, set_a):
        again = envs.make_task_set("A", d=20, seed=0)
        for a, b in zip(set_a, again):
            assert np.array_equal(a.drive, b.drive)
            assert np.array_equal(a.contact_center, b.contact_center)

    def test_orthogonal_variant(self):
        tasks = envs.make_task_set("A", d=20, seed=0, orthogonal=True)
        rows = np.vstack([t.drive for t in tasks])
        np.testing.assert_allclose(rows @ rows.T, np.eye(4), atol=1e-12)

    @pytest.mark.parametrize("set_id,d", [("A", 5), ("B", 6), ("C", 20)])
    def test_invalid_sets(self, set_id, d):
        with pytest.raises(ConfigurationError):
            envs.make_task_set(set_id, d=d)

    def test_task_set_round_trip(self, set_b, tmp_path):
        path = tmp_path / "task_set.json"
        envs.save_task_set(path, set_b)
        loaded = envs.load_task_set(path)
        assert loaded.identity() == set_b.identity()
        for a, b in zip(set_b, loaded):
            assert a.goal == b.goal
            assert np.array_equal(a.drive, b.drive)


class TestDynamics:
    def test_valve_drive_aligned_reaches_full_rotation(self, set_a):
        task = set_a[0]
        total, state = run_episode(task, lambda s: task.drive[0])
        assert state.object[0] == pytest.approx(task.horizon, rel=1e-9)
        assert total == pytest.approx(task.horizon * (1.0 - task.action_penalty), rel=1e-9)

    def test_valve_orthogonal_action_only_pays_penalty(self, set_a):
        task = set_a[0]
        other = set_a[1].drive[0] - task.drive[0] * (task.drive[0] @ set_a[1].drive[0])
        other /= np.linalg.norm(other)
        total, state = run_episode(task, lambda s: other)
        assert abs(state.object[0]) < 1e-10
        assert total == pytest.approx(-task.horizon * task.action_penalty, rel=1e-9)

    def test_valve_reward_is_linear_in_drive_projection(self, set_a):
        task = set_a[2]
        state = envs.reset(task)
        a = np.random.default_rng(0).uniform(-1, 1, size=task.d)
        result = envs.step(task, state, a)
        assert result.reward == pytest.approx(a @ task.drive[0] - task.action_penalty * a @ a)

    def test_dice_goal_reachable(self, set_b):
        task = set_b[0]
        state = envs.reset(task, seed=3)
        goal = np.array(task.goal)
        needed = goal - state.object
        # per-step latent push that covers the gap exactly in one episode
        action = (needed / task.horizon) @ task.drive
        total, final = run_episode(task, lambda s: action, seed=3)
        assert np.linalg.norm(final.object - goal) < 1e-8
        assert total > 0

    def test_dice_reset_in_unit_ball(self, set_b):
        state = envs.reset(set_b[0], seed=1, num_envs=50)
        assert np.all(np.linalg.norm(state.object, axis=-1) <= 1.0)

    def test_weight_pull_gravity(self, set_b):
        task = set_b[2]
        total, state = run_episode(task, lambda s: np.zeros(task.d))
        assert state.object[0] == pytest.approx(-task.gravity * task.horizon)
        assert total == pytest.approx(-task.gravity * task.horizon)

    def test_screw_coupling(self, set_b):
        task = set_b[3]
        state = envs.reset(task)
        result = envs.step(task, state, task.drive[0])
        assert result.next_state.object[0] == pytest.approx(1.0)
        assert result.next_state.object[1] == pytest.approx(task.coupling)

    def test_engagement_gate(self):
        task = envs.make_task_set("A", d=20, seed=0, engagement_on=True)[0]
        assert envs.engagement(task, task.contact_center) == pytest.approx(1.0)
        far = task.contact_center + 10.0 * task.engagement_width * np.eye(task.d)[0]
        assert envs.engagement(task, far) < 1e-10

    def test_batched_step_matches_single(self, set_b):
        task = set_b[1]
        actions = np.random.default_rng(0).uniform(-1, 1, size=(4, task.d))
        batch = envs.step(task, envs.reset(task, num_envs=4), actions)
        for i in range(4):
            single = envs.step(task, envs.reset(task), actions[i])
            assert batch.reward[i] == pytest.approx(single.reward)

    def test_observation_layout(self, set_b):
        task = set_b[0]
        obs = envs.observe(task, envs.reset(task, num_envs=3))
        assert obs.shape == (3, task.obs_dim)
        assert task.obs_dim == task.d + 3 + 1

    def test_nan_action(self, set_a):
        with pytest.raises(DomainError):
            envs.step(set_a[0], envs.reset(set_a[0]), np.full(20, np.nan))

    def test_wrong_action_dimension(self, set_a):
        with pytest.raises(ConfigurationError):
            envs.step(set_a[0], envs.reset(set_a[0]), np.zeros(19))

    def test_step_after_done(self, set_a):
        task = set_a[0]
        _, state = run_episode(task, lambda s: np.zeros(task.d))
        with pytest.raises(DomainError):
            envs.step(task, state, np.zeros(task.d))

    def test_done_flag_on_last_step(self, set_a):
        task = set_a[0]
        state = envs.reset(task)
        for t in range(task.horizon):
            result = envs.step(task, state, np.zeros(task.d))
            assert result.done == (t == task.horizon - 1)
            state = result.next_state


class TestDerivedTasks:
    def test_unseen_tasks_from_set_b(self, set_b):
        unseen = envs.make_unseen_tasks(set_b.tasks, seed=0)
        assert [t.name for t in unseen] == ["cyl_valve", "cw_valve", "topdown_screw"]
        basis = envs.oracle_subspace(set_b.tasks)
        cyl = unseen[0].drive[0]
        assert np.linalg.norm(basis.T @ cyl) == pytest.approx(1.0)

    def test_cw_valve_reverses_reward(self, set_a):
        cw = envs.make_unseen_tasks(set_a.tasks, kinds=("cw_valve",))[0]
        total, _ = run_episode(cw, lambda s: -cw.drive[0])
        assert total == pytest.approx(cw.horizon * (1.0 - cw.action_penalty))

    def test_cylindrical_valve_in_span_of_set_a(self, set_a):
        cyl = envs.make_unseen_tasks(set_a.tasks, kinds=("cyl_valve",))[0]
        basis = envs.oracle_subspace(set_a.tasks)
        assert np.linalg.norm(basis.T @ cyl.drive[0]) == pytest.approx(1.0)

    def test_missing_kind(self, set_a):
        with pytest.raises(ConfigurationError):
            envs.make_unseen_tasks(set_a.tasks, kinds=("topdown_screw",))

    def test_orthogonal_task_is_outside_span(self, set_a):
        orth = envs.make_orthogonal_task(set_a.tasks, "valve", seed=0)
        basis = envs.oracle_subspace(set_a.tasks)
        assert np.linalg.norm(basis.T @ orth.drive[0]) < 1e-10

    def test_sparse_valve_rewards_only_near_target(self, set_a):
        sparse = envs.make_sparse_valve(set_a.tasks)
        assert sparse.kind == "sparse_valve"
        state = envs.reset(sparse)
        result = envs.step(sparse, state, np.zeros(sparse.d))
        assert result.reward == 0.0
        step = sparse.goal[0] * sparse.drive[0] / np.sum(sparse.drive[0] ** 2)
        result = envs.step(sparse, state, np.clip(step, -1.0, 1.0))
        hit = abs(result.next_state.object[0] - sparse.goal[0]) < sparse.goal_threshold
        assert result.reward == (1.0 if hit else 0.0)


def constant_action(task, seed=0):
    """A fixed action that moves the task's reward term at a steady rate"""
    if task.kind == "dice":
        start = envs.reset(task, seed=seed).object
        return ((np.array(task.goal) - start) / task.horizon) @ task.drive
    row = task.drive[1] if task.kind == "screw" else task.drive[0]
    return task.reward_sign * row


def dense_tasks():
    set_a = envs.make_task_set("A", d=20, seed=0)
    set_b = envs.make_task_set("B", d=20, seed=0)
    derived = envs.make_unseen_tasks(set_b.tasks) + envs.make_unseen_tasks(set_a.tasks, kinds=("cyl_valve",))
    return list(set_a) + list(set_b) + derived + [envs.make_orthogonal_task(set_a.tasks, "valve")]


class TestInvariants:
    @pytest.mark.parametrize("engagement_on", [False, True])
    def test_set_a_tasks_share_one_reward_formula(self, engagement_on):
        tasks = envs.make_task_set("A", d=20, seed=0, engagement_on=engagement_on).tasks
        rng = np.random.default_rng(4)
        for task in tasks:
            # the first task's code path, fed this task's drive and contact center
            swapped = dataclasses.replace(tasks[0], drive=task.drive, contact_center=task.contact_center)
            state = envs.EnvState(rng.uniform(-2.0, 2.0, size=(16, task.d)), rng.normal(size=(16, 1)), 0)
            a = rng.uniform(-1.0, 1.0, size=(16, task.d))
            ours = envs.step(task, state, a).reward
            np.testing.assert_array_equal(ours, envs.step(swapped, state, a).reward)
            gate = envs.engagement(task, state.joints)
            expected = gate * (a @ task.drive[0]) - task.action_penalty * np.sum(a * a, axis=-1)
            np.testing.assert_allclose(ours, expected, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("index", range(13))
    def test_every_dense_task_is_reachable_with_a_constant_action(self, index):
        task = dense_tasks()[index]
        action = constant_action(task, seed=index)
        assert np.all(np.abs(action) <= 1.0)
        total, _ = run_episode(task, lambda s: action, seed=index)
        assert total >= 0.5 * task.horizon * task.joint_step * (1.0 - task.action_penalty), task.name

    def test_dense_task_list_covers_every_dense_kind(self):
        tasks = dense_tasks()
        assert len(tasks) == 13
        assert {t.kind for t in tasks} == {"valve", "dice", "weight_pull", "screw"}
        assert {"cw_valve", "cyl_valve", "topdown_screw", "orth_valve"} <= {t.name for t in tasks}
