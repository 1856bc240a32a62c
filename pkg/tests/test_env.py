"""Environment behavior: layout, determinism, collisions, reward wiring, traces."""

import csv

import numpy as np
import pytest

from overtake.env import (
    EnvConfig,
    RaceEnv,
    TRACE_COLUMNS,
    _obb_overlap,
    detect_collisions,
    resolve_car_contacts,
    resolve_wall_contact,
)
from overtake.errors import ConfigurationError, ContractViolation
from overtake.reward import RewardInputs, RewardWeights, overtaking_reward, racing_reward
from overtake.sensing import NormStats, normalize_features, update_stats
from overtake.vehicle import (
    DEFAULT_CAR,
    VehicleState,
    ai_equilibrium_speed,
    body_corners,
    builtin_ai_action,
)

from conftest import circle_track


def make_env(track=None, **kwargs):
    return RaceEnv(EnvConfig(**kwargs), track=track)


# -- reset ----------------------------------------------------------------------


def test_reset_places_opponents_consecutively_ahead(oval):
    env = make_env(n_opponents=5, initial_separation=50.0)
    length = env.track.total_length
    res = env.reset(seed=0, start_cp=length - 30.0)
    assert res.info["cp"] == pytest.approx(length - 30.0, abs=1e-9)
    # spacing survives the lap seam: opponents 4 and 5 sit past cp = 0
    for i, d in enumerate(res.info["delta_cp"]):
        assert d == pytest.approx(50.0 * (i + 1), abs=1e-9)
    assert res.reward == 0.0 and not res.done
    assert res.observation.shape == (96,)


def test_reset_same_seed_is_reproducible():
    env_a = make_env(n_opponents=2, initial_separation=100.0)
    env_b = make_env(n_opponents=2, initial_separation=100.0)
    ra = env_a.reset(seed=7)
    rb = env_b.reset(seed=7)
    assert np.array_equal(ra.observation, rb.observation)
    assert env_a.cp == env_b.cp
    # and the whole rollout stays bitwise identical under identical actions
    actions = np.random.default_rng(3).uniform(-1.0, 1.0, size=(30, 2))
    for act in actions:
        sa = env_a.step(tuple(act))
        sb = env_b.step(tuple(act))
        assert np.array_equal(sa.observation, sb.observation)
        assert sa.reward == sb.reward
        assert env_a.cp == env_b.cp
    assert env_a.reset(seed=8).info["cp"] != pytest.approx(ra.info["cp"])


def test_reset_start_cp_override_and_wrap(oval):
    env = make_env()
    length = env.track.total_length
    res = env.reset(seed=1, start_cp=123.4)
    assert res.info["cp"] == pytest.approx(123.4, abs=1e-12)
    np.testing.assert_allclose(env.cars[0].position, env.track.point_at(123.4))
    assert env.cars[0].speed == pytest.approx(0.5 * DEFAULT_CAR.top_speed)
    assert env.reset(seed=1, start_cp=length + 5.0).info["cp"] == pytest.approx(5.0)


# -- lifecycle guards -----------------------------------------------------------


def test_step_before_reset_raises():
    env = make_env()
    with pytest.raises(ContractViolation):
        env.step((0.0, 0.0))


def test_episode_ends_exactly_at_step_limit_and_stays_done():
    env = make_env(episode_steps=5)
    env.reset(seed=0, start_cp=10.0)
    for k in range(1, 6):
        res = env.step((0.0, 0.2))
        assert res.done is (k == 5)
        assert res.info["step"] == k
    with pytest.raises(ContractViolation):
        env.step((0.0, 0.2))


def test_config_rejections():
    with pytest.raises(ConfigurationError):
        EnvConfig(dt=0.05)
    with pytest.raises(ConfigurationError):
        EnvConfig(reward_kind="lap_time")
    with pytest.raises(ConfigurationError):
        EnvConfig(collision_mode="bounce")
    with pytest.raises(ConfigurationError):
        EnvConfig(opponent_layout="side_by_side")
    with pytest.raises(ConfigurationError):
        EnvConfig(episode_steps=0)
    with pytest.raises(ConfigurationError):
        EnvConfig(n_opponents=-1)
    # opponent chain longer than the lap cannot be placed
    track = circle_track(radius=100.0)
    with pytest.raises(ConfigurationError):
        RaceEnv(EnvConfig(n_opponents=3, initial_separation=250.0), track=track)
    with pytest.raises(ContractViolation):
        RaceEnv(EnvConfig(), stats=NormStats())


# -- reward wiring --------------------------------------------------------------


def test_wall_contact_flag_and_racing_penalty_algebra():
    # zero steering on a circle drifts into the outer wall; flags_only keeps
    # the post-step state exactly what the reward kernel saw
    track = circle_track(radius=100.0, half_width=5.0)
    env = make_env(track=track, collision_mode="flags_only", reward_kind="racing")
    env.reset(seed=0, start_cp=0.0)
    weights = env.config.weights
    for _ in range(100):
        prev_cp = env.cp[0]
        res = env.step((0.0, 0.3))
        if res.info["wall_contact"]:
            break
    else:
        pytest.fail("straight-line drift never reached the wall")
    v = env.cars[0].body_velocity
    expected = env.track.progress_delta(prev_cp, env.cp[0]) - (
        weights.wall_collision * float(v @ v)
    )
    assert res.reward == pytest.approx(expected, rel=1e-12)
    assert res.reward < 0.0  # at speed the quadratic penalty dominates progress
    assert res.info["reward"] == res.reward


def test_car_contact_flag_and_overtaking_reward_algebra():
    # slow opponent on a small circle, fast ego spawned just behind: the gap
    # closes within a few steps and the contact penalty plus gated progress
    # terms must match the reward kernel evaluated on the env's own quantities
    track = circle_track(radius=20.0, half_width=6.0)
    env = make_env(
        track=track,
        n_opponents=1,
        initial_separation=5.0,
        collision_mode="flags_only",
        reward_kind="overtaking",
    )
    env.reset(seed=0, start_cp=0.0)
    weights = env.config.weights
    for _ in range(10):
        prev = (env.cp[0], env.cp[1])
        res = env.step((0.0, 1.0))
        if res.info["car_contact"]:
            break
    else:
        pytest.fail("ego never reached the opponent")
    inputs = RewardInputs(
        ego_cp_prev=prev[0],
        ego_cp_curr=env.cp[0],
        speed=env.cars[0].body_velocity,
        wall_contact=res.info["wall_contact"],
        car_contact=1,
        opponent_cp=((prev[1], env.cp[1]),),
    )
    assert res.reward == pytest.approx(
        overtaking_reward(inputs, weights, env.track), rel=1e-12
    )
    # closing on the opponent inside detection range earns positive credit
    gap_term = weights.relative_progress * (
        env.track.progress_delta(prev[0], prev[1])
        - env.track.progress_delta(env.cp[0], env.cp[1])
    )
    assert gap_term > 0.0


def test_racing_reward_ignores_opponent_gap(oval):
    env = make_env(n_opponents=1, initial_separation=20.0, reward_kind="racing")
    env.reset(seed=3, start_cp=100.0)
    prev_cp = env.cp[0]
    res = env.step((0.0, 0.5))
    if not (res.info["wall_contact"] or res.info["car_contact"]):
        assert res.reward == pytest.approx(
            env.track.progress_delta(prev_cp, env.cp[0]), rel=1e-12
        )


def test_collision_free_rollout_rewards_telescope_to_net_progress(oval):
    # the built-in AI laps cleanly, so every reward is a pure progress
    # increment and the sum must collapse to the wrap-aware net progress
    env = make_env(episode_steps=600)
    length = env.track.total_length
    env.reset(seed=0, start_cp=length - 100.0)
    total = 0.0
    crossed_seam = False
    for _ in range(600):
        act = builtin_ai_action(env.cars[0], env.track, 0.9, env.config.car)
        res = env.step((act.steering, act.pedal))
        assert res.info["wall_contact"] == 0 and res.info["car_contact"] == 0
        total += res.reward
        if env.cp[0] < 100.0:
            crossed_seam = True
    assert crossed_seam
    assert res.info["progress"] > length / 2
    assert total == pytest.approx(res.info["progress"], abs=1e-9)


# -- collision resolution -------------------------------------------------------


def test_resolve_car_contacts_separates_all_pairs(rng):
    # a lone pair must separate exactly; mutually overlapping clusters are
    # solved iteratively and may keep a sub-millimeter residual
    for _ in range(300):
        n = int(rng.integers(2, 5))
        cars = [
            VehicleState.at(
                rng.uniform(-3.0, 3.0, size=2),
                float(rng.uniform(-np.pi, np.pi)),
                float(rng.uniform(0.0, 30.0)),
            )
            for _ in range(n)
        ]
        resolved = resolve_car_contacts(cars)
        for i in range(n):
            assert resolved[i].speed <= cars[i].speed + 1e-12
            for j in range(i + 1, n):
                mtv = _obb_overlap(
                    body_corners(resolved[i]), body_corners(resolved[j])
                )
                if n == 2:
                    assert mtv is None
                else:
                    assert mtv is None or np.linalg.norm(mtv) < 1e-3


def test_resolve_wall_contact_puts_body_back_inside():
    track = circle_track(radius=100.0, half_width=6.0)
    # place the car 1 m beyond the outer wall, pointing along the track
    frame_pos = track.point_at(50.0)
    normal = frame_pos / np.linalg.norm(frame_pos)
    state = VehicleState.at(frame_pos + normal * 7.0, track.heading_at(50.0) + 0.4, 20.0)
    fixed = resolve_wall_contact(state, track)
    frame = track.centerline_projection(fixed.position)
    assert abs(frame.lateral_offset) <= track.half_width - DEFAULT_CAR.body_width / 2
    assert fixed.heading == pytest.approx(frame.tangent_heading)
    assert fixed.speed == pytest.approx(20.0 * abs(np.cos(0.4)), rel=1e-9)


def test_resolve_mode_keeps_ego_on_circuit():
    track = circle_track(radius=80.0, half_width=5.0)
    env = make_env(track=track, episode_steps=200)
    env.reset(seed=2, start_cp=0.0)
    for _ in range(200):
        res = env.step((0.0, 1.0))  # aims straight at the wall forever
        frame = env.track.centerline_projection(env.cars[0].position)
        assert abs(frame.lateral_offset) <= env.track.half_width + 1e-9
        assert np.isfinite(env.cars[0].speed)
    assert res.done


def test_detect_collisions_flags_overlap_and_wall(oval):
    cp = 200.0
    a = VehicleState.at(oval.point_at(cp), oval.heading_at(cp), 10.0)
    b = VehicleState.at(oval.point_at(cp + 2.0), oval.heading_at(cp + 2.0), 10.0)
    c = VehicleState.at(oval.point_at(cp + 100.0), oval.heading_at(cp + 100.0), 10.0)
    flags = detect_collisions([a, b, c], oval)
    assert flags[0] == (0, 1) and flags[1] == (0, 1) and flags[2] == (0, 0)


# -- opponents ------------------------------------------------------------------


def test_opponents_hold_equilibrium_speed_without_wall_contact():
    track = circle_track(radius=150.0, half_width=6.0)
    env = make_env(track=track, n_opponents=1, initial_separation=200.0)
    env.reset(seed=5, start_cp=0.0)
    eq = ai_equilibrium_speed(track, 0.0, env.config.target_speed_scale)
    start_progress = 0.0
    for _ in range(300):
        act = builtin_ai_action(env.cars[0], env.track, 0.9, env.config.car)
        res = env.step((act.steering, act.pedal))
        opp = env.cars[1]
        assert opp.wall_flag == 0
        assert 0.6 * eq <= opp.speed <= 1.3 * eq
    assert res.info["opponent_progress"][0] > start_progress + 200.0


def test_delta_cp_stays_within_half_lap(oval, rng):
    env = make_env(n_opponents=2, initial_separation=300.0, episode_steps=200)
    env.reset(seed=11)
    half = env.track.total_length / 2
    for act in rng.uniform(-1.0, 1.0, size=(200, 2)):
        res = env.step(tuple(act))
        for d in res.info["delta_cp"]:
            assert abs(d) <= half + 1e-9
        assert len(res.info["lead"]) == 2


# -- observations ---------------------------------------------------------------


def test_raw_observation_layout(oval):
    env = make_env(n_opponents=1, initial_separation=15.0)
    res = env.reset(seed=9, start_cp=50.0)
    raw = res.observation
    assert raw.shape == (96,)
    np.testing.assert_allclose(raw[0:3], env.cars[0].body_velocity)
    assert np.all(raw[7:79] > 0.0) and np.all(raw[7:79] <= 20.0)
    assert raw[79] == env.cars[0].prev_steering
    assert raw[80] == 0.0 and raw[81] == 0.0


def test_normalized_env_matches_manual_normalization(oval):
    actions = np.random.default_rng(4).uniform(-1.0, 1.0, size=(20, 2))
    raw_env = make_env(n_opponents=1, initial_separation=30.0)
    raws = [raw_env.reset(seed=21).observation]
    for act in actions:
        raws.append(raw_env.step(tuple(act)).observation)

    stats = NormStats()
    for raw in raws:
        update_stats(stats, raw)
    stats.freeze()

    norm_env = RaceEnv(
        EnvConfig(n_opponents=1, initial_separation=30.0), stats=stats
    )
    res = norm_env.reset(seed=21)
    assert np.array_equal(res.observation, normalize_features(raws[0], stats))
    for k, act in enumerate(actions):
        res = norm_env.step(tuple(act))
        assert np.array_equal(res.observation, normalize_features(raws[k + 1], stats))


# -- tracing --------------------------------------------------------------------


def test_trace_schema_and_row_count(oval, tmp_path):
    env = make_env(n_opponents=1, initial_separation=100.0)
    env.enable_trace()
    env.reset(seed=0, start_cp=10.0)
    for _ in range(5):
        env.step((0.0, 0.4))
    out = tmp_path / "trace.csv"
    env.write_trace(out)
    with open(out, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == TRACE_COLUMNS
    body = rows[1:]
    assert len(body) == (5 + 1) * 2
    assert [r[1] for r in body] == ["0", "1"] * 6
    assert [int(r[0]) for r in body] == [s for s in range(6) for _ in range(2)]
    # opponent rows never carry reward
    assert all(float(r[-1]) == 0.0 for r in body if r[1] == "1")
