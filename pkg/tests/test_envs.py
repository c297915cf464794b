import numpy as np
import pytest

from wmrefine.envs import (
    FORWARD,
    PO_DEPTH,
    PO_WIDTH,
    TURN_LEFT,
    TURN_RIGHT,
    DELTAS,
    HELD_OUT_COMBOS,
    CollectArena,
    YMaze,
    checkpoint_reward,
    make_env,
)


def drive(env, seed, actions):
    env.reset(seed)
    results = []
    for a in actions:
        if env.done:
            break
        results.append(env.step(a))
    return results


def random_actions(seed, n):
    rng = np.random.default_rng(seed)
    return [int(a) for a in rng.integers(0, 3, size=n)]


class TestCheckpointFormula:
    def test_at_t_zero_is_one_third(self):
        assert checkpoint_reward(0, 400) == pytest.approx(1.0 / 3.0)

    def test_at_t_horizon_is_decayed(self):
        assert checkpoint_reward(400, 400) == pytest.approx((1.0 / 3.0) * 0.8)
        assert checkpoint_reward(400, 400) == pytest.approx(0.26667, abs=1e-4)


class TestYMazeLayout:
    def test_same_seed_identical_layout_and_schedule(self):
        a, b = YMaze(), YMaze()
        obs_a, obs_b = a.reset(99), b.reset(99)
        np.testing.assert_array_equal(obs_a, obs_b)
        assert a.target == b.target and a.static == b.static
        assert a._patrols == b._patrols and a.heading == b.heading
        acts = random_actions(1, 60)
        for ra, rb in zip(drive(a, 99, acts), drive(b, 99, acts)):
            assert ra.reward == rb.reward and ra.cont == rb.cont
            np.testing.assert_array_equal(ra.observation, rb.observation)

    def test_target_arm_uniform_over_seeds(self):
        counts = np.zeros(3)
        env = YMaze()
        n = 3000
        for seed in range(n):
            env.reset(seed)
            counts[env.target_arm] += 1
        p = 1.0 / 3.0
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 3 * sigma)

    def test_static_counts_within_paper_range(self):
        env = YMaze()
        for seed in range(300):
            env.reset(seed)
            per_arm = {0: 0, 1: 0, 2: 0}
            for cell in env.static:
                for arm in range(3):
                    for depth in (1, 2, 3):
                        for lane in (0, 1):
                            if env._arm_cell(arm, depth, lane) == cell:
                                per_arm[arm] += 1
            assert all(0 <= v <= 3 for v in per_arm.values())

    def test_arms_remain_passable(self):
        # never both lanes of one depth blocked by statics
        env = YMaze()
        for seed in range(300):
            env.reset(seed)
            for arm in range(3):
                for depth in (1, 2, 3):
                    blocked = sum(env._arm_cell(arm, depth, lane) in env.static
                                  for lane in (0, 1))
                    assert blocked <= 1

    def test_target_in_posterior_third(self):
        env = YMaze()
        for seed in range(100):
            env.reset(seed)
            cells = [env._arm_cell(env.target_arm, d, l) for d in (7, 8, 9) for l in (0, 1)]
            assert env.target in cells

    def test_initial_distance_recorded(self):
        env = YMaze()
        env.reset(0)
        assert env.initial_distance >= 3


class TestYMazeStep:
    def test_static_collision_penalty(self):
        env = YMaze()
        env.reset(0)
        cell = next(iter(env.static))
        env.pos = None
        for h, (dr, dc) in enumerate(DELTAS):
            cand = (cell[0] - dr, cell[1] - dc)
            if env._in_bounds(cand) and env._free[cand] and cand not in env.static:
                env.pos, env.heading = cand, h
                break
        assert env.pos is not None
        env._dynamic = []
        env._patrols = []
        res = env.step(FORWARD)
        assert res.reward == pytest.approx(-0.05)
        assert res.info["collision"] == "static"
        assert env.pos == cell  # touch penalties do not block movement

    def test_dynamic_collision_penalty(self):
        env = YMaze()
        env.reset(0)
        env.static = set()
        cell = env._dynamic[0]
        for h, (dr, dc) in enumerate(DELTAS):
            cand = (cell[0] - dr, cell[1] - dc)
            if env._in_bounds(cand) and env._free[cand]:
                env.pos, env.heading = cand, h
                break
        res = env.step(FORWARD)
        assert res.reward == pytest.approx(-0.1)
        assert res.info["collision"] == "dynamic"

    def test_checkpoints_in_order_once_each(self):
        env = YMaze()
        for seed in range(40):
            env.reset(seed)
            seen = []
            for a in random_actions(seed + 1, 400):
                if env.done:
                    break
                res = env.step(a)
                if res.info["checkpoint"] is not None:
                    seen.append(res.info["checkpoint"])
            assert seen == sorted(seen)
            assert len(seen) == len(set(seen))

    def test_reward_bounds(self):
        env = YMaze()
        for seed in range(30):
            env.reset(seed)
            for a in random_actions(seed, 400):
                if env.done:
                    break
                res = env.step(a)
                assert -0.1 - 1e-9 <= res.reward <= 1.0 / 3.0 + 1e-9

    def test_terminates_at_horizon(self):
        env = YMaze(horizon=50)
        env.reset(1)
        for _ in range(50):
            res = env.step(TURN_LEFT)
        assert res.cont == 0 and env.done

    def test_step_after_done_rejected(self):
        env = YMaze(horizon=5)
        env.reset(2)
        for _ in range(5):
            env.step(TURN_RIGHT)
        with pytest.raises(RuntimeError, match="terminated"):
            env.step(FORWARD)

    def test_reaching_target_terminates_with_final_checkpoint(self):
        env = YMaze()
        env.reset(3)
        env.static = set()
        env._patrols = []
        env._dynamic = []
        # walk the shortest path by following the BFS distance field
        for _ in range(100):
            if env.done:
                break
            d_here = env._dist[env.pos]
            best = None
            for h, (dr, dc) in enumerate(DELTAS):
                cand = (env.pos[0] + dr, env.pos[1] + dc)
                if env._in_bounds(cand) and env._free[cand] and env._dist[cand] == d_here - 1:
                    best = h
                    break
            if env.heading != best:
                env.heading = best
            res = env.step(FORWARD)
        assert env.done and env.pos == env.target
        assert res.info["checkpoint"] == 2
        assert res.cont == 0


class TestObservability:
    def test_po_window_excludes_behind(self):
        env = YMaze()
        env.reset(4)
        fwd = DELTAS[env.heading]
        for f, l, cell in env._window_cells():
            rel = (cell[0] - env.pos[0], cell[1] - env.pos[1])
            assert rel[0] * fwd[0] + rel[1] * fwd[1] >= 0

    def test_fo_shape_is_full_grid(self):
        env = YMaze("fo")
        obs = env.reset(5)
        rows, cols, ch = env.obs_spatial_shape
        assert (rows, cols) == env.shape
        assert obs.size == rows * cols * ch + 4

    def test_same_seed_actions_same_rewards_po_fo(self):
        acts = random_actions(6, 120)
        po = drive(YMaze("po"), 42, acts)
        fo = drive(YMaze("fo"), 42, acts)
        assert [r.reward for r in po] == [r.reward for r in fo]
        assert [r.cont for r in po] == [r.cont for r in fo]

    def test_mid_episode_switch_rejected(self):
        env = YMaze()
        env.reset(7)
        env.step(FORWARD)
        with pytest.raises(RuntimeError, match="mid-episode"):
            env.set_observability("fo")

    def test_switch_allowed_at_reset(self):
        env = YMaze()
        env.reset(8)
        env.set_observability("fo")
        assert env.observability == "fo"

    def test_obs_one_hot_per_cell(self):
        env = YMaze("po")
        obs = env.reset(9).reshape(env.obs_spatial_shape)
        np.testing.assert_array_equal(obs.sum(axis=-1), 1.0)


class TestCollect:
    def test_ten_pickups_terminate(self):
        env = CollectArena()
        env.reset(0)
        count = 0
        while not env.done and count < 10:
            cell = next(iter(env.objects))
            for h, (dr, dc) in enumerate(DELTAS):
                cand = (cell[0] - dr, cell[1] - dc)
                if env._in_bounds(cand) and env._free[cand]:
                    env.pos, env.heading = cand, h
                    break
            res = env.step(FORWARD)
            count += 1
        assert count == 10 and res.cont == 0 and env.done

    def test_all_good_scores_ten(self):
        env = CollectArena()
        env.reset(1)
        env.objects = {c: env.good_type for c in env.objects}
        total = 0.0
        while not env.done:
            cell = next(iter(env.objects))
            for h, (dr, dc) in enumerate(DELTAS):
                cand = (cell[0] - dr, cell[1] - dc)
                if env._in_bounds(cand) and env._free[cand]:
                    env.pos, env.heading = cand, h
                    break
            total += env.step(FORWARD).reward
        assert total == pytest.approx(10.0)

    def test_rewards_in_unit_set(self):
        env = CollectArena()
        env.reset(2)
        for a in random_actions(3, 300):
            if env.done:
                break
            r = env.step(a).reward
            assert r in (-1.0, 0.0, 1.0)

    def test_eval_mode_draws_held_out_combos(self):
        env = CollectArena()
        for seed in range(200):
            env.reset(seed, eval_mode=True)
            assert (env.room, env.good_type, env.bad_type) in HELD_OUT_COMBOS

    def test_train_mode_avoids_held_out_combos(self):
        env = CollectArena()
        for seed in range(200):
            env.reset(seed)
            assert (env.room, env.good_type, env.bad_type) not in HELD_OUT_COMBOS

    def test_step_cap(self):
        env = CollectArena()
        env.reset(4)
        assert env.horizon == 300
        for _ in range(300):
            res = env.step(TURN_LEFT)
        assert res.cont == 0


def test_make_env_tasks():
    assert isinstance(make_env("ymaze-po"), YMaze)
    assert make_env("ymaze-fo").observability == "fo"
    assert isinstance(make_env("collect"), CollectArena)
    with pytest.raises(ValueError):
        make_env("atari")
