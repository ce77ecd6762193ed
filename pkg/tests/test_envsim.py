import numpy as np
import pytest

from emcot_vla.config.configurations import EnvConfig, TASK_IDS, Thresholds
from emcot_vla.envsim.collect import read_trajectory, write_trajectory
from emcot_vla.envsim.env import TabletopEnv, denormalize_action, hold_action, normalize_action, reset, step
from emcot_vla.envsim.expert import ScriptedExpert
from emcot_vla.envsim.tasks import make_task
from emcot_vla.processing.primitives import idle_flags_for_arm
from emcot_vla.utils.errors import ConfigurationError, ExpertRefusal, InputError


def test_reset_deterministic(env_config):
    task = make_task("stack_two", "easy")
    _, first = reset(task, 7, env_config)
    _, second = reset(task, 7, env_config)
    assert np.array_equal(first.image, second.image)
    assert np.array_equal(first.proprio, second.proprio)


def test_easy_level_has_only_task_objects(env_config):
    state, _ = reset(make_task("stack_two", "easy"), 3, env_config)
    assert not any(obj.distractor for obj in state.objects)
    assert len(state.objects) == 2


def test_hard_level_adds_distractors_and_shifts_background(env_config):
    _, easy = reset(make_task("stack_two", "easy"), 3, env_config)
    state, hard = reset(make_task("stack_two", "hard"), 3, env_config)
    assert sum(obj.distractor for obj in state.objects) >= 1
    assert np.abs(easy.image.astype(float).mean() - hard.image.astype(float).mean()) > 0


def test_unknown_task_is_configuration_error():
    with pytest.raises(ConfigurationError):
        make_task("juggle")


def test_negative_seed_rejected(env_config):
    with pytest.raises(InputError):
        reset(make_task("stack_two"), -1, env_config)


def test_hold_action_changes_only_step_counter(env_config):
    task = make_task("place_a2b", "easy")
    state, obs = reset(task, 1, env_config)
    new, new_obs, done = step(state, hold_action(state), task, env_config)
    assert new.step == state.step + 1
    assert np.array_equal(new.proprio(), state.proprio())
    assert np.array_equal(new_obs.image, obs.image)
    assert not done


def test_closing_far_from_objects_attaches_nothing(env_config):
    task = make_task("press_button", "easy")
    state, _ = reset(task, 0, env_config)
    action = hold_action(state)
    action[3] = 0.0
    action[7] = 0.0
    new, _, _ = step(state, action, task, env_config)
    assert new.arms["left"].held is None
    assert new.arms["right"].held is None


def test_nan_action_rejected(env_config):
    task = make_task("stack_two")
    state, _ = reset(task, 0, env_config)
    with pytest.raises(InputError):
        step(state, np.full(8, np.nan), task, env_config)


def test_displacement_clipped_to_max_speed(env_config):
    task = make_task("stack_two")
    state, _ = reset(task, 0, env_config)
    action = hold_action(state)
    action[:3] = [5.0, 0.0, 0.0]
    new, _, _ = step(state, action, task, env_config)
    moved = np.linalg.norm(new.arms["left"].ee - state.arms["left"].ee)
    assert moved <= env_config.max_speed + 1e-9


def test_env_requires_reset():
    with pytest.raises(InputError):
        TabletopEnv().step(np.zeros(8))


def test_action_normalization_inverts(env_config):
    action = np.array([0.25, -0.5, 0.1, 1.0, 0.0, 0.3, -0.2, 0.0])
    restored = denormalize_action(normalize_action(action, env_config), env_config)
    assert np.allclose(restored, action)


def test_expert_solves_stack_two(stack_trajectory, env_config):
    assert stack_trajectory.success
    assert len(stack_trajectory) <= env_config.step_limit + 1


def test_expert_held_object_tracks_end_effector(env_config):
    task = make_task("stack_two", "easy")
    state, _ = reset(task, 0, env_config)
    expert = ScriptedExpert(task, state, env_config)
    done = False
    while not done:
        state, _, done = step(state, expert.act(state), task, env_config)
        for arm in state.arms.values():
            if arm.held is not None:
                assert np.allclose(state.object(arm.held).position, arm.ee)


def test_handover_left_grasp_precedes_right(handover_trajectory):
    proprio = handover_trajectory.proprio

    def first_close(slot: int) -> int:
        closing = np.flatnonzero(np.diff(proprio[:, slot]) <= -0.5)
        assert closing.size
        return int(closing[0])

    assert first_close(3) < first_close(7)
    assert [b["subtask"] for b in handover_trajectory.boundaries] == handover_trajectory.plan


def test_expert_movements_separated_by_idle_runs(stack_trajectory):
    thresholds = Thresholds()
    proprio = stack_trajectory.proprio
    for arm in ("left", "right"):
        flags = idle_flags_for_arm(proprio, arm, thresholds)
        run = 0
        seen_motion = False
        for flag in flags:
            if flag:
                run += 1
                continue
            if seen_motion and 0 < run:
                assert run >= thresholds.theta_min_idle
            seen_motion = True
            run = 0


def test_expert_refuses_missing_objects(env_config):
    task = make_task("stack_two", "easy")
    state, _ = reset(task, 0, env_config)
    state.objects = []
    with pytest.raises(ExpertRefusal):
        ScriptedExpert(task, state, env_config)


@pytest.mark.parametrize("image_format", ["png", "blob"])
def test_trajectory_file_is_byte_identical(tmp_path, stack_trajectory, image_format):
    stamp = {"config_hash": "abc", "tool_version": "0"}
    first = write_trajectory(tmp_path / "a.jsonl", stack_trajectory, stamp, image_format)
    second = write_trajectory(tmp_path / "b.jsonl", stack_trajectory, stamp, image_format)
    assert first.read_bytes() == second.read_bytes()
    restored, header = read_trajectory(first)
    assert header["trajectory_id"] == stack_trajectory.trajectory_id
    assert np.array_equal(restored.images, stack_trajectory.images)
    assert np.allclose(restored.actions, stack_trajectory.actions)


def test_every_task_has_instruction():
    for task_id in TASK_IDS:
        assert make_task(task_id).instruction


def test_env_config_rejects_unknown_image_format():
    with pytest.raises(ConfigurationError):
        EnvConfig(image_format="jpeg")
