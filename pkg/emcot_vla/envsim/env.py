"""
Динамика настольной среды: сброс, шаг и нормализация действий.

Действие a ∈ R^8: для каждой руки (левая, затем правая) приращение позиции схвата (3)
и абсолютная целевая степень раскрытия схвата (1).
"""

import numpy as np
from loguru import logger

from emcot_vla.config.configurations import TASK_IDS, EnvConfig
from emcot_vla.envsim.tasks import TaskSpec, build_objects, get_definition, is_success
from emcot_vla.envsim.world import (
    ARMS,
    BASE_BACKGROUND,
    DISTRACTOR_COLORS,
    ArmState,
    ObjectState,
    Observation,
    WorldState,
    observe,
)
from emcot_vla.utils.errors import InputError

ARM_START = {"left": (1.5, 11.0), "right": (1.5, 5.0)}


def _initial_arms(config: EnvConfig) -> dict[str, ArmState]:
    return {
        name: ArmState(ee=np.array([x, y, config.carry_height], dtype=np.float64))
        for name, (x, y) in ARM_START.items()
    }


def _randomize(state: WorldState, rng: np.random.Generator, config: EnvConfig) -> None:
    """
    Рандомизация уровня hard: сдвиг фона, шум поз и отвлекающие объекты.
    """
    signs = rng.choice([-1.0, 1.0], size=3)
    shift = signs * rng.uniform(config.background_shift / 2, config.background_shift, size=3)
    state.background = tuple(
        int(np.clip(c + s, 0, 255)) for c, s in zip(BASE_BACKGROUND, shift)
    )
    state.texture = 6.0

    bound = config.table_size - 1.0
    for arm in state.arms.values():
        jitter = rng.uniform(-config.pose_jitter, config.pose_jitter, size=2)
        arm.ee[:2] = np.clip(arm.ee[:2] + jitter, 1.0, bound)
    for obj in state.objects:
        jitter = rng.uniform(-config.pose_jitter, config.pose_jitter, size=2)
        obj.position[:2] = np.clip(obj.position[:2] + jitter, 1.0, bound)

    task_objects = list(state.objects)
    zones = [obj for obj in task_objects if obj.shape == "zone"]
    n_distractors = int(rng.integers(1, config.max_distractors + 1))
    for i in range(n_distractors):
        shape = "block" if i % 2 == 0 else "ball"
        height = 1.0 if shape == "block" else 0.8
        for _ in range(50):
            xy = rng.uniform(1.5, config.table_size - 1.5, size=2)
            far_from_objects = all(
                np.linalg.norm(xy - obj.position[:2]) >= 2.5 for obj in state.objects
            )
            far_from_arms = all(
                np.linalg.norm(xy - np.asarray(start)) >= 2.0 for start in ARM_START.values()
            )
            off_corridor = all(abs(xy[1] - zone.position[1]) >= 2.0 for zone in zones)
            if far_from_objects and far_from_arms and off_corridor:
                state.objects.append(
                    ObjectState(
                        id=f"distractor_{i}",
                        color=DISTRACTOR_COLORS[i % len(DISTRACTOR_COLORS)],
                        shape=shape,
                        position=np.array([xy[0], xy[1], height / 2]),
                        height=height,
                        distractor=True,
                    )
                )
                break
        else:
            logger.debug("Не удалось разместить отвлекающий объект {}", i)


def reset(task: TaskSpec, seed: int, config: EnvConfig | None = None) -> tuple[WorldState, Observation]:
    """
    Детерминированный сброс сцены.

    Базовая раскладка зависит только от (задача, seed), поэтому уровни easy и hard
    с одинаковым seed отличаются лишь рандомизацией.

    Parameters
    ----------
    task : TaskSpec
        Задача.
    seed : int
        Неотрицательное зерно.
    config : EnvConfig
        Параметры среды.

    Returns
    -------
    tuple[WorldState, Observation]
        Начальное состояние и наблюдение.
    """
    config = config or EnvConfig()
    if seed < 0:
        raise InputError(f"seed должен быть неотрицательным: {seed}")
    definition = get_definition(task.task_id)
    task_index = TASK_IDS.index(task.task_id)

    layout = definition.layout(np.random.default_rng([seed, task_index]))
    state = WorldState(
        objects=build_objects(definition, layout),
        arms=_initial_arms(config),
        render_seed=int(seed),
    )
    if task.level == "hard":
        _randomize(state, np.random.default_rng([seed, task_index, 1]), config)
    return state, observe(state, config)


def hold_action(state: WorldState) -> np.ndarray:
    """
    Тождественное действие: нулевые приращения, цели схватов равны текущему раскрытию.
    """
    left, right = state.arms["left"], state.arms["right"]
    return np.array([0.0, 0.0, 0.0, left.gripper, 0.0, 0.0, 0.0, right.gripper])


def _push(state: WorldState, arm: ArmState, moved: np.ndarray, config: EnvConfig) -> None:
    planar = moved[:2]
    if arm.held is not None or arm.gripper < 0.5 or arm.ee[2] > config.push_height:
        return
    if not np.any(planar):
        return
    for obj in state.objects:
        if not obj.graspable or state.holder_of(obj.id) is not None:
            continue
        rel = obj.position[:2] - arm.ee[:2]
        if np.linalg.norm(rel) < config.push_radius and float(planar @ rel) > 0:
            obj.position[:2] = np.clip(obj.position[:2] + planar, 0.0, config.table_size)


def _drop(state: WorldState, obj: ObjectState) -> None:
    rest = 0.0
    for other in state.objects:
        if other.id == obj.id or other.shape == "zone" or state.holder_of(other.id):
            continue
        close = np.linalg.norm(other.position[:2] - obj.position[:2]) < 0.8
        if close and other.top <= obj.position[2] + 1e-9:
            rest = max(rest, other.top)
    obj.position[2] = rest + obj.height / 2


def _update_gripper(state: WorldState, name: str, target: float, config: EnvConfig) -> None:
    arm = state.arms[name]
    was_open = arm.gripper >= 0.5
    arm.gripper = float(target)
    if was_open and arm.gripper < 0.5 and arm.held is None:
        candidates = [
            (float(np.linalg.norm(obj.position - arm.ee)), obj.id)
            for obj in state.objects
            if obj.graspable
        ]
        candidates = [c for c in candidates if c[0] <= config.grasp_radius]
        if candidates:
            _, object_id = min(candidates)
            holder = state.holder_of(object_id)
            if holder is not None:
                state.arms[holder].held = None
            arm.held = object_id
            state.object(object_id).position = arm.ee.copy()
    elif not was_open and arm.gripper >= 0.5 and arm.held is not None:
        obj = state.object(arm.held)
        arm.held = None
        _drop(state, obj)


def _press_buttons(state: WorldState) -> None:
    for obj in state.objects:
        if obj.shape != "button":
            continue
        for arm in state.arms.values():
            near = np.linalg.norm(arm.ee[:2] - obj.position[:2]) <= 0.6
            if near and arm.ee[2] <= obj.top + 0.2:
                obj.active = True


def step(
    state: WorldState, action: np.ndarray, task: TaskSpec, config: EnvConfig | None = None
) -> tuple[WorldState, Observation, bool]:
    """
    Один шаг среды.

    Parameters
    ----------
    state : WorldState
        Текущее состояние (не изменяется).
    action : np.ndarray
        Действие из R^8; приращения ограничиваются по норме ``max_speed``.
    task : TaskSpec
        Задача с предикатом успеха.
    config : EnvConfig
        Параметры среды.

    Returns
    -------
    tuple[WorldState, Observation, bool]
        Новое состояние, наблюдение и признак завершения.
    """
    config = config or EnvConfig()
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape != (8,):
        raise InputError(f"Ожидалось действие размерности 8, получено {action.shape}")
    if not np.all(np.isfinite(action)):
        raise InputError("Действие содержит NaN или бесконечность")

    new = state.copy()
    upper = np.array([config.table_size, config.table_size, config.z_max])
    for i, name in enumerate(ARMS):
        arm = new.arms[name]
        delta = action[4 * i : 4 * i + 3]
        norm = float(np.linalg.norm(delta))
        if norm > config.max_speed:
            delta = delta * (config.max_speed / norm)
        previous = arm.ee.copy()
        arm.ee = np.clip(arm.ee + delta, 0.0, upper)
        _push(new, arm, arm.ee - previous, config)
        _update_gripper(new, name, float(np.clip(action[4 * i + 3], 0.0, 1.0)), config)

    for arm in new.arms.values():
        if arm.held is not None:
            new.object(arm.held).position = arm.ee.copy()
    _press_buttons(new)

    new.step += 1
    done = is_success(task, new) or new.step >= config.step_limit
    return new, observe(new, config), done


def normalize_action(action: np.ndarray, config: EnvConfig) -> np.ndarray:
    """
    Приведение действия к [-1, 1]: приращения делятся на ``max_speed``,
    раскрытие переводится как 2g - 1.
    """
    action = np.asarray(action, dtype=np.float64).copy()
    out = action.copy()
    for i in range(2):
        out[..., 4 * i : 4 * i + 3] = action[..., 4 * i : 4 * i + 3] / config.max_speed
        out[..., 4 * i + 3] = action[..., 4 * i + 3] * 2.0 - 1.0
    return out


def denormalize_action(action: np.ndarray, config: EnvConfig) -> np.ndarray:
    action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    out = action.copy()
    for i in range(2):
        out[..., 4 * i : 4 * i + 3] = action[..., 4 * i : 4 * i + 3] * config.max_speed
        out[..., 4 * i + 3] = (action[..., 4 * i + 3] + 1.0) / 2.0
    return out


class TabletopEnv:
    """
    Обёртка над ``reset``/``step`` с хранимым состоянием для замкнутого исполнения.
    Один экземпляр не рассчитан на параллельные вызовы ``step``.
    """

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.task: TaskSpec | None = None
        self.state: WorldState | None = None

    def reset(self, task: TaskSpec, seed: int) -> Observation:
        self.task = task
        self.state, obs = reset(task, seed, self.config)
        return obs

    def step(self, action: np.ndarray) -> tuple[Observation, bool]:
        if self.state is None or self.task is None:
            raise InputError("Среда не сброшена")
        self.state, obs, done = step(self.state, action, self.task, self.config)
        return obs, done

    @property
    def success(self) -> bool:
        return self.state is not None and is_success(self.task, self.state)
