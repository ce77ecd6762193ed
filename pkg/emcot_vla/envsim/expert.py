"""
Сценарный эксперт: следование по опорным точкам с паузами между фазами.

Каждая фаза (перемещение схвата или смена раскрытия) предваряется паузой из
``hold_frames`` тождественных действий, поэтому извлечение примитивов выделяет
каждую фазу в отдельный сегмент. Пауза относится к подзадаче следующей за ней фазы.
"""

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from emcot_vla.config.configurations import EnvConfig
from emcot_vla.envsim.env import hold_action
from emcot_vla.envsim.tasks import TaskSpec, get_definition
from emcot_vla.envsim.world import ARMS, ObjectState, WorldState
from emcot_vla.utils.errors import ExpertRefusal

HANDOVER_POINT = (8.0, 8.0)


@dataclass(frozen=True)
class Phase:
    """
    Фаза программы эксперта.

    Parameters
    ----------
    subtask : int
        Индекс подзадачи в плане задачи.
    arm : str
        Исполняющая рука.
    kind : str
        ``move`` (перемещение схвата в ``target``) или ``grip`` (раскрытие ``gripper``).
    target : tuple[float, float, float] | None
        Целевая позиция схвата.
    gripper : float | None
        Целевое раскрытие.
    expect_held : str | None
        Объект, который должен оказаться в схвате после фазы; пустая строка
        означает, что схват должен опустеть.
    """

    subtask: int
    arm: str
    kind: str
    target: tuple[float, float, float] | None = None
    gripper: float | None = None
    expect_held: str | None = None


def _above(obj: ObjectState, z: float, dx: float = 0.0) -> tuple[float, float, float]:
    return float(obj.position[0] + dx), float(obj.position[1]), float(z)


def _arm_by_side(obj: ObjectState) -> str:
    return "left" if obj.position[1] >= 8.0 else "right"


def _program_stack(state: WorldState, config: EnvConfig) -> list[Phase]:
    red, blue = state.object("red_block"), state.object("blue_block")
    carry = config.carry_height
    return [
        Phase(0, "left", "move", _above(red, carry)),
        Phase(0, "left", "move", _above(red, red.position[2] + 0.5)),
        Phase(0, "left", "grip", gripper=0.0, expect_held=red.id),
        Phase(0, "left", "move", _above(red, carry)),
        Phase(1, "left", "move", _above(blue, carry)),
        Phase(1, "left", "move", _above(blue, blue.top + red.height / 2 + 0.5)),
        Phase(1, "left", "grip", gripper=1.0, expect_held=""),
    ]


def _program_handover(state: WorldState, config: EnvConfig) -> list[Phase]:
    green = state.object("green_block")
    carry = config.carry_height
    center = (*HANDOVER_POINT, carry)
    return [
        Phase(0, "left", "move", _above(green, carry)),
        Phase(0, "left", "move", _above(green, green.position[2] + 0.5)),
        Phase(0, "left", "grip", gripper=0.0, expect_held=green.id),
        Phase(0, "left", "move", _above(green, carry)),
        Phase(1, "left", "move", center),
        Phase(2, "right", "move", center),
        Phase(2, "right", "grip", gripper=0.0, expect_held=green.id),
        Phase(2, "left", "grip", gripper=1.0, expect_held=""),
    ]


def _program_place(state: WorldState, config: EnvConfig) -> list[Phase]:
    orange, plate = state.object("orange_block"), state.object("purple_plate")
    carry = config.carry_height
    return [
        Phase(0, "right", "move", _above(orange, carry)),
        Phase(0, "right", "move", _above(orange, orange.position[2] + 0.5)),
        Phase(0, "right", "grip", gripper=0.0, expect_held=orange.id),
        Phase(0, "right", "move", _above(orange, carry)),
        Phase(1, "right", "move", _above(plate, carry)),
        Phase(1, "right", "move", _above(plate, 1.5)),
        Phase(1, "right", "grip", gripper=1.0, expect_held=""),
    ]


def _program_press(state: WorldState, config: EnvConfig) -> list[Phase]:
    button = state.object("cyan_button")
    arm = _arm_by_side(button)
    return [
        Phase(0, arm, "move", _above(button, config.carry_height)),
        Phase(1, arm, "move", _above(button, 0.5)),
    ]


def _program_sweep(state: WorldState, config: EnvConfig) -> list[Phase]:
    ball, zone = state.object("yellow_ball"), state.object("gray_zone")
    arm = _arm_by_side(ball)
    behind = _above(ball, config.carry_height, dx=-1.3)
    lowered = (behind[0], behind[1], 0.4)
    finish = (float(zone.position[0] - 1.15), behind[1], 0.4)
    return [
        Phase(0, arm, "move", behind),
        Phase(0, arm, "move", lowered),
        Phase(1, arm, "move", finish),
    ]


PROGRAMS: dict[str, tuple[tuple[str, ...], Callable[[WorldState, EnvConfig], list[Phase]]]] = {
    "stack_two": (("red_block", "blue_block"), _program_stack),
    "handover_block": (("green_block",), _program_handover),
    "place_a2b": (("orange_block", "purple_plate"), _program_place),
    "press_button": (("cyan_button",), _program_press),
    "sweep_to_zone": (("yellow_ball", "gray_zone"), _program_sweep),
}


class ScriptedExpert:
    """
    Детерминированный контроллер по опорным точкам.

    Перемещение на расстояние d выполняется за n = ceil(d / max_speed) равных шагов.
    Фазы короче ``min_waypoint_distance`` пропускаются вместе со своей паузой.
    Если фаза не достигла цели или захват не состоялся, эксперт отказывается
    (``ExpertRefusal``).

    Parameters
    ----------
    task : TaskSpec
        Решаемая задача.
    state : WorldState
        Начальное состояние, по которому строится программа.
    config : EnvConfig
        Параметры среды.
    """

    def __init__(self, task: TaskSpec, state: WorldState, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.task = task
        self.plan = list(get_definition(task.task_id).plan)
        required, program = PROGRAMS[task.task_id]
        missing = [object_id for object_id in required if not state.has_object(object_id)]
        if missing:
            raise ExpertRefusal(f"В сцене нет объектов задачи: {missing}")
        self.phases = program(state, self.config)
        self.frame_subtasks: list[int] = []
        self._index = 0
        self._hold_left: int | None = None
        self._remaining: int | None = None
        self._pending: Phase | None = None

    @property
    def finished(self) -> bool:
        return self._index >= len(self.phases)

    def _skippable(self, phase: Phase, state: WorldState) -> bool:
        if phase.kind != "move":
            return False
        distance = np.linalg.norm(np.asarray(phase.target) - state.arms[phase.arm].ee)
        return bool(distance < self.config.min_waypoint_distance)

    def _enter(self, state: WorldState) -> None:
        while not self.finished and self._skippable(self.phases[self._index], state):
            self._index += 1
        self._hold_left = self.config.hold_frames
        self._remaining = None

    def _advance(self, phase: Phase) -> None:
        self._pending = phase
        self._index += 1
        self._hold_left = None

    def _verify(self, state: WorldState) -> None:
        phase, self._pending = self._pending, None
        if phase is None:
            return
        arm = state.arms[phase.arm]
        if phase.kind == "move":
            miss = float(np.linalg.norm(np.asarray(phase.target) - arm.ee))
            if miss > 1e-6:
                raise ExpertRefusal(
                    f"Фаза перемещения руки {phase.arm} не достигла цели (промах {miss:.3g})"
                )
        elif phase.expect_held is not None and (arm.held or "") != phase.expect_held:
            raise ExpertRefusal(
                f"Ожидалось '{phase.expect_held}' в схвате руки {phase.arm}, получено '{arm.held}'"
            )

    def act(self, state: WorldState) -> np.ndarray:
        """
        Следующее действие программы для текущего состояния.

        Parameters
        ----------
        state : WorldState
            Состояние после предыдущего действия эксперта.

        Returns
        -------
        np.ndarray
            Действие из R^8.
        """
        self._verify(state)
        if self._hold_left is None:
            self._enter(state)
        if self.finished:
            raise ExpertRefusal("Программа эксперта исчерпана, задача не решена")
        phase = self.phases[self._index]
        action = hold_action(state)

        if self._hold_left > 0:
            self._hold_left -= 1
        else:
            slot = 4 * ARMS.index(phase.arm)
            if phase.kind == "move":
                arm = state.arms[phase.arm]
                offset = np.asarray(phase.target, dtype=np.float64) - arm.ee
                if self._remaining is None:
                    distance = float(np.linalg.norm(offset))
                    self._remaining = max(1, math.ceil(distance / self.config.max_speed - 1e-9))
                action[slot : slot + 3] = offset / self._remaining
                self._remaining -= 1
                if self._remaining == 0:
                    self._advance(phase)
            else:
                action[slot + 3] = phase.gripper
                self._advance(phase)

        self.frame_subtasks.append(phase.subtask)
        return action

    def boundaries(self) -> list[dict[str, int | str]]:
        """
        Кадры начала подзадач по уже выданным действиям.
        """
        out: list[dict[str, int | str]] = []
        for frame, subtask in enumerate(self.frame_subtasks):
            if not out or out[-1]["index"] != subtask:
                out.append({"index": subtask, "subtask": self.plan[subtask], "start": frame})
        return out


def scripted_expert(task: TaskSpec, state: WorldState, config: EnvConfig | None = None) -> ScriptedExpert:
    """
    Построение эксперта для задачи; действия выдаёт ``ScriptedExpert.act``.
    """
    return ScriptedExpert(task, state, config)
