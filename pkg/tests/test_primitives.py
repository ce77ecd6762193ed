import numpy as np
import pytest

from emcot_vla.config.configurations import Thresholds
from emcot_vla.processing.primitives import (
    extract_primitives,
    get_direction,
    is_idle,
    read_labels,
    segment_actions,
    summarize_primitives,
    write_labels,
)
from emcot_vla.utils.errors import ConfigurationError, InputError
from emcot_vla.utils.mappings import lookup_sentence, replacer

I, M = True, False


def trace(left_xyz, left_g, right_xyz=None, right_g=None) -> np.ndarray:
    left_xyz = np.asarray(left_xyz, dtype=float)
    t = len(left_xyz)
    right_xyz = np.zeros((t, 3)) if right_xyz is None else np.asarray(right_xyz, dtype=float)
    right_g = np.ones(t) if right_g is None else np.asarray(right_g, dtype=float)
    return np.column_stack([left_xyz, left_g, right_xyz, right_g])


def documented_trace() -> np.ndarray:
    x = [0.0] * 5 + [0.5 * (i + 1) for i in range(6)] + [3.0] * 4
    g = [1.0] * 11 + [0.0] * 4
    return trace([[v, 0.0, 0.0] for v in x], g)


def test_is_idle_cases():
    th = Thresholds()
    p = np.zeros(3)
    assert is_idle(p, p, 1.0, 1.0, th)
    assert not is_idle(np.array([2 * th.theta_vel, 0, 0]), p, 1.0, 1.0, th)
    assert not is_idle(p, p, 1.0 - th.theta_dg, 1.0, th)


def test_is_idle_rejects_nan():
    with pytest.raises(InputError):
        is_idle(np.array([np.nan, 0, 0]), np.zeros(3), 0.0, 0.0, Thresholds())


@pytest.mark.parametrize(
    "flags, theta, expected",
    [
        ([I, I, I, I], 3, []),
        ([I, I, M, M, M, I, I, I, I, M, M], 3, [(2, 4), (9, 10)]),
        ([I, M, I, M, I], 2, [(1, 3)]),
        ([M, I, M], 1, [(0, 0), (2, 2)]),
        ([I, M, M, I, I, M], 3, [(1, 5)]),
    ],
)
def test_segment_actions(flags, theta, expected):
    assert segment_actions(flags, theta) == expected


def test_segment_actions_empty_input():
    with pytest.raises(InputError):
        segment_actions([], 3)


@pytest.mark.parametrize(
    "delta, theta_dir, expected",
    [
        ((1.0, 0.0, 0.0), 0.7, "forward"),
        ((1.0, 0.9, 0.0), 0.8, "forward-left"),
        ((0.0, 0.0, 0.0), 0.7, "stationary"),
        ((-0.2, -1.0, 0.0), 0.7, "right"),
        ((0.0, 0.0, -0.5), 0.7, "down"),
        ((-1.0, 0.0, 1.0), 0.7, "backward-up"),
    ],
)
def test_get_direction(delta, theta_dir, expected):
    assert get_direction(np.array(delta), theta_dir, 0.1) == expected


def test_documented_trace():
    th = Thresholds(theta_vel=0.1, theta_dg=0.3, theta_min_idle=3)
    table = extract_primitives(documented_trace(), th)
    kinds = table.kinds("left")
    df = table.df[table.df["arm"] == "left"].reset_index(drop=True)
    assert kinds[5:11] == ["move"] * 6
    assert set(df.loc[5:10, "direction"]) == {"forward"}
    assert kinds[11] == "grasp"
    assert all(k == "idle" for i, k in enumerate(kinds) if i < 5 or i > 11)
    assert set(table.kinds("right")) == {"idle"}


def test_constant_trace_is_all_idle():
    proprio = np.tile([1.0, 2.0, 3.0, 1.0, 4.0, 5.0, 6.0, 0.0], (12, 1))
    table = extract_primitives(proprio)
    assert set(table.df["kind"]) == {"idle"}
    assert not any(table.active_frames())


def test_grasp_release_symmetry():
    th = Thresholds(theta_vel=0.1, theta_dg=0.3, theta_min_idle=3)
    proprio = documented_trace()
    flipped = proprio.copy()
    flipped[:, 3] = 1.0 - flipped[:, 3]
    swap = {"grasp": "release", "release": "grasp"}
    original = extract_primitives(proprio, th).kinds("left")
    mirrored = extract_primitives(flipped, th).kinds("left")
    assert mirrored == [swap.get(k, k) for k in original]


def test_every_cell_has_one_label():
    proprio = documented_trace()
    table = extract_primitives(proprio)
    assert len(table.df) == 2 * len(proprio)
    assert not table.df.duplicated(["frame", "arm"]).any()
    moves = table.df[table.df["kind"] == "move"]
    assert (moves["direction"] != "").all()
    assert (table.df.loc[table.df["kind"] != "move", "direction"] == "").all()


def test_raising_theta_vel_never_reduces_idle_frames():
    rng = np.random.default_rng(3)
    steps = rng.normal(scale=0.15, size=(40, 3)) * (rng.random((40, 1)) > 0.5)
    proprio = trace(np.cumsum(steps, axis=0), np.ones(40))
    counts = []
    for theta_vel in (0.05, 0.1, 0.2, 0.4):
        kinds = extract_primitives(proprio, Thresholds(theta_vel=theta_vel)).kinds("left")
        counts.append(kinds.count("idle"))
    assert counts == sorted(counts)


def test_dict_input_requires_both_arms():
    with pytest.raises(InputError):
        extract_primitives({"left": np.zeros((4, 4))})


def test_dict_input_matches_array_input():
    proprio = documented_trace()
    table = extract_primitives({"left": proprio[:, :4], "right": proprio[:, 4:]})
    assert table.kinds("left") == extract_primitives(proprio).kinds("left")


def test_short_trace_rejected():
    with pytest.raises(InputError):
        extract_primitives(np.zeros((1, 8)))


def test_literal_idle_subsegments_flag_changes_labels():
    th = Thresholds(theta_vel=0.1, theta_dg=0.3, theta_min_idle=3, literal_idle_subsegments=True)
    kinds = extract_primitives(documented_trace(), th).kinds("left")
    assert kinds[5:11] == ["idle"] * 6


def test_thresholds_validation():
    with pytest.raises(ConfigurationError):
        Thresholds(theta_vel=0.0)
    with pytest.raises(ConfigurationError):
        Thresholds(theta_dir=1.5)
    with pytest.raises(ConfigurationError):
        Thresholds(theta_min_idle=0)


def test_summary_and_sentences():
    th = Thresholds(theta_vel=0.1, theta_dg=0.3, theta_min_idle=3)
    table = extract_primitives(documented_trace(), th)
    summary = summarize_primitives(table)
    left = summary[summary["arm"] == "left"]
    assert list(left["kind"]) == ["idle", "move", "grasp", "idle"]
    assert left.iloc[1]["sentence"] == lookup_sentence("move", "forward") == "move the arm forward"
    assert lookup_sentence("grasp") == "close the gripper to grasp"


def test_labels_file(tmp_path):
    table = extract_primitives(documented_trace(), trajectory_id="demo")
    path = write_labels(tmp_path / "labels.jsonl", [table], {"config_hash": "x"})
    df = read_labels(path)
    assert len(df) == len(table.df)
    assert set(df["trajectory_id"]) == {"demo"}
    assert set(df["config_hash"]) == {"x"}


def test_visual_alias_replacement():
    assert replacer("<visual_start> x <visual_end>") == "<vision_start> x <vision_end>"


def test_expert_trajectory_has_nontrivial_segments(stack_trajectory):
    table = extract_primitives(stack_trajectory.proprio)
    kinds = table.kinds("left")
    assert "move" in kinds
    assert "grasp" in kinds
    assert "release" in kinds


# размеченный вручную корпус трасс


def still(n: int) -> list[tuple[float, float, float]]:
    return [(0.0, 0.0, 0.0)] * n


def go(step: tuple[float, float, float], n: int) -> list[tuple[float, float, float]]:
    return [step] * n


def arm(steps, grip) -> np.ndarray:
    """
    Рука (T, 4): позиции как накопленная сумма смещений по кадрам, затем раскрытие.
    """
    positions = np.cumsum(np.asarray(steps, dtype=float), axis=0)
    return np.column_stack([positions, np.asarray(grip, dtype=float)])


def idle(n: int) -> list[str]:
    return ["idle"] * n


def moves(direction: str, n: int) -> list[str]:
    return [f"move:{direction}"] * n


X = (0.5, 0.0, 0.0)
BASE = dict(theta_vel=0.1, theta_dg=0.3, theta_min_idle=3, theta_dir=0.7)

# имя: (пороги, левая рука, правая рука, метки левой, метки правой)
LABELLED_TRACES = {
    "forward_then_grasp": (
        {},
        arm(still(5) + go(X, 6) + still(4), [1.0] * 11 + [0.0] * 4),
        arm(still(15), [1.0] * 15),
        idle(5) + moves("forward", 6) + ["grasp"] + idle(3),
        idle(15),
    ),
    "short_pause_merged": (
        {},
        arm(still(1) + go(X, 2) + still(2) + go(X, 2) + still(4), [1.0] * 11),
        arm(still(11), [1.0] * 11),
        idle(1) + moves("forward", 2) + idle(2) + moves("forward", 2) + idle(4),
        idle(11),
    ),
    "short_pause_merged_idle_runs": (
        {"literal_idle_subsegments": True},
        arm(still(1) + go(X, 2) + still(2) + go(X, 2) + still(4), [1.0] * 11),
        arm(still(11), [1.0] * 11),
        idle(3) + moves("stationary", 2) + idle(6),
        idle(11),
    ),
    "long_pause_splits": (
        {},
        arm(still(1) + go((0.0, 0.5, 0.0), 2) + still(3) + go((0.0, 0.0, -0.5), 2) + still(2), [1.0] * 10),
        arm(still(10), [1.0] * 10),
        idle(1) + moves("left", 2) + idle(3) + moves("down", 2) + idle(2),
        idle(10),
    ),
    "long_pause_splits_idle_runs": (
        {"literal_idle_subsegments": True},
        arm(still(1) + go((0.0, 0.5, 0.0), 2) + still(3) + go((0.0, 0.0, -0.5), 2) + still(2), [1.0] * 10),
        arm(still(10), [1.0] * 10),
        idle(10),
        idle(10),
    ),
    "gripper_only": (
        {},
        arm(still(11), [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.75, 0.75]),
        arm(still(11), [1.0] * 11),
        idle(3) + ["grasp"] + idle(4) + ["release"] + idle(2),
        idle(11),
    ),
    "both_arms": (
        {},
        arm(still(1) + go(X, 3) + still(6), [1.0] * 4 + [0.0] * 6),
        arm(still(5) + go((-0.5, 0.0, 0.0), 3) + still(2), [0.0] * 8 + [1.0] * 2),
        idle(1) + moves("forward", 3) + ["grasp"] + idle(5),
        idle(5) + moves("backward", 3) + ["release"] + idle(1),
    ),
    "direction_tie": (
        {"theta_dir": 0.5},
        arm(still(1) + go((0.25, 0.125, 0.0), 4) + still(3), [1.0] * 8),
        arm(still(1) + go((0.25, -15 / 128, 0.0), 4) + still(3), [1.0] * 8),
        idle(1) + moves("forward-left", 4) + idle(3),
        idle(1) + moves("forward", 4) + idle(3),
    ),
    "three_axes": (
        {},
        arm(still(1) + go((0.2, -0.2, 0.15), 3) + still(3), [1.0] * 7),
        arm(still(7), [0.0] * 7),
        idle(1) + moves("forward-right-up", 3) + idle(3),
        idle(7),
    ),
    "drift_then_grasp_in_motion": (
        {},
        arm(still(1) + go((0.05, 0.0, 0.0), 3) + go(X, 3) + still(3), [1.0] * 6 + [0.0] * 4),
        arm(still(1) + go((0.0, 0.0, 0.05), 9), [1.0] * 10),
        idle(4) + moves("forward", 3) + idle(3),
        idle(10),
    ),
}


def cell_labels(table, side: str) -> list[str]:
    df = table.df[table.df["arm"] == side].sort_values("frame")
    return [f"{k}:{d}" if k == "move" else k for k, d in zip(df["kind"], df["direction"])]


@pytest.mark.parametrize("name", sorted(LABELLED_TRACES))
def test_labelled_trace_corpus(name):
    overrides, left, right, expected_left, expected_right = LABELLED_TRACES[name]
    assert len(left) == len(right) == len(expected_left) == len(expected_right)
    table = extract_primitives({"left": left, "right": right}, Thresholds(**{**BASE, **overrides}))
    assert len(table.df) == 2 * len(left)
    assert cell_labels(table, "left") == expected_left
    assert cell_labels(table, "right") == expected_right
