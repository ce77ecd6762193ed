"""
Набор задач: шаблоны инструкций, раскладка объектов и предикаты успеха.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from emcot_vla.config.configurations import LEVELS
from emcot_vla.envsim.world import ObjectState, WorldState
from emcot_vla.utils.errors import ConfigurationError


@dataclass(frozen=True)
class TaskSpec:
    """
    Описание задачи.

    Parameters
    ----------
    task_id : str
        Идентификатор задачи из реестра.
    template : str
        Шаблон инструкции со слотами объектов.
    instruction : str
        Инструкция l после подстановки.
    predicate_id : str
        Идентификатор предиката успеха.
    level : str
        ``easy`` или ``hard``.
    """

    task_id: str
    template: str
    instruction: str
    predicate_id: str
    level: str = "easy"

    def to_dict(self) -> dict[str, str]:
        return {
            "task_id": self.task_id,
            "template": self.template,
            "instruction": self.instruction,
            "predicate_id": self.predicate_id,
            "level": self.level,
        }


@dataclass(frozen=True)
class ObjectTemplate:
    id: str
    color: str
    shape: str
    height: float


@dataclass(frozen=True)
class TaskDefinition:
    template: str
    slots: dict[str, str]
    objects: tuple[ObjectTemplate, ...]
    layout: Callable[[np.random.Generator], dict[str, tuple[float, float]]]
    predicate_id: str
    plan: tuple[str, ...]


def _on_top(state: WorldState, top_id: str, base_id: str, tolerance: float = 0.6) -> bool:
    top, base = state.object(top_id), state.object(base_id)
    if state.holder_of(top_id) is not None:
        return False
    close = np.linalg.norm(top.position[:2] - base.position[:2]) <= tolerance
    return bool(close and top.position[2] > base.position[2] + base.height / 2)


def _stacked(state: WorldState) -> bool:
    return _on_top(state, "red_block", "blue_block")


def _handed_over(state: WorldState) -> bool:
    left, right = state.arms["left"], state.arms["right"]
    return right.held == "green_block" and left.held is None and left.gripper >= 0.5


def _on_plate(state: WorldState) -> bool:
    return _on_top(state, "orange_block", "purple_plate", tolerance=1.0)


def _pressed(state: WorldState) -> bool:
    return state.object("cyan_button").active


def _in_zone(state: WorldState) -> bool:
    ball, zone = state.object("yellow_ball"), state.object("gray_zone")
    if state.holder_of("yellow_ball") is not None:
        return False
    return bool(np.all(np.abs(ball.position[:2] - zone.position[:2]) <= 1.5))


PREDICATES: dict[str, Callable[[WorldState], bool]] = {
    "stacked": _stacked,
    "handed_over": _handed_over,
    "on_plate": _on_plate,
    "pressed": _pressed,
    "in_zone": _in_zone,
}


def _layout_stack(rng: np.random.Generator) -> dict[str, tuple[float, float]]:
    return {
        "red_block": (rng.uniform(5.0, 10.0), rng.uniform(9.5, 13.0)),
        "blue_block": (rng.uniform(5.0, 10.0), rng.uniform(3.0, 6.5)),
    }


def _layout_handover(rng: np.random.Generator) -> dict[str, tuple[float, float]]:
    return {"green_block": (rng.uniform(5.0, 9.0), rng.uniform(11.0, 13.5))}


def _layout_place(rng: np.random.Generator) -> dict[str, tuple[float, float]]:
    return {
        "orange_block": (rng.uniform(5.0, 9.0), rng.uniform(3.0, 6.0)),
        "purple_plate": (rng.uniform(10.0, 13.0), rng.uniform(6.5, 10.0)),
    }


def _layout_press(rng: np.random.Generator) -> dict[str, tuple[float, float]]:
    return {"cyan_button": (rng.uniform(6.0, 12.0), rng.uniform(4.0, 12.0))}


def _layout_sweep(rng: np.random.Generator) -> dict[str, tuple[float, float]]:
    y = rng.uniform(5.0, 11.0)
    return {"yellow_ball": (rng.uniform(4.0, 6.5), y), "gray_zone": (13.5, y)}


TASKS: dict[str, TaskDefinition] = {
    "stack_two": TaskDefinition(
        template="stack the {a} block on the {b} block",
        slots={"a": "red", "b": "blue"},
        objects=(
            ObjectTemplate("red_block", "red", "block", 1.0),
            ObjectTemplate("blue_block", "blue", "block", 1.0),
        ),
        layout=_layout_stack,
        predicate_id="stacked",
        plan=("Pick up the red block", "Stack it on the blue block"),
    ),
    "handover_block": TaskDefinition(
        template="hand the {a} block from the left arm to the right arm",
        slots={"a": "green"},
        objects=(ObjectTemplate("green_block", "green", "block", 1.0),),
        layout=_layout_handover,
        predicate_id="handed_over",
        plan=(
            "Pick up the green block with the left arm",
            "Bring the green block to the center",
            "Pass the green block to the right arm",
        ),
    ),
    "place_a2b": TaskDefinition(
        template="put the {a} block on the {b} plate",
        slots={"a": "orange", "b": "purple"},
        objects=(
            ObjectTemplate("orange_block", "orange", "block", 1.0),
            ObjectTemplate("purple_plate", "purple", "plate", 0.2),
        ),
        layout=_layout_place,
        predicate_id="on_plate",
        plan=("Pick up the orange block", "Put it on the purple plate"),
    ),
    "press_button": TaskDefinition(
        template="press the {a} button",
        slots={"a": "cyan"},
        objects=(ObjectTemplate("cyan_button", "cyan", "button", 0.4),),
        layout=_layout_press,
        predicate_id="pressed",
        plan=("Move above the cyan button", "Press the cyan button"),
    ),
    "sweep_to_zone": TaskDefinition(
        template="sweep the {a} ball into the {b} zone",
        slots={"a": "yellow", "b": "gray"},
        objects=(
            ObjectTemplate("yellow_ball", "yellow", "ball", 0.8),
            ObjectTemplate("gray_zone", "gray", "zone", 0.0),
        ),
        layout=_layout_sweep,
        predicate_id="in_zone",
        plan=(
            "Lower the arm behind the yellow ball",
            "Push the yellow ball into the gray zone",
        ),
    ),
}


def get_definition(task_id: str) -> TaskDefinition:
    if task_id not in TASKS:
        raise ConfigurationError(f"Неизвестная задача: {task_id}")
    return TASKS[task_id]


def make_task(task_id: str, level: str = "easy") -> TaskSpec:
    """
    Создание описания задачи по идентификатору.

    Parameters
    ----------
    task_id : str
        Идентификатор из реестра ``TASKS``.
    level : str
        Уровень рандомизации ``easy`` или ``hard``.

    Returns
    -------
    TaskSpec
        Задача с подставленной инструкцией.
    """
    definition = get_definition(task_id)
    if level not in LEVELS:
        raise ConfigurationError(f"Неизвестный уровень: {level}")
    return TaskSpec(
        task_id=task_id,
        template=definition.template,
        instruction=definition.template.format(**definition.slots),
        predicate_id=definition.predicate_id,
        level=level,
    )


def task_from_dict(data: dict[str, str]) -> TaskSpec:
    get_definition(data["task_id"])
    return TaskSpec(**data)


def is_success(task: TaskSpec, state: WorldState) -> bool:
    return PREDICATES[task.predicate_id](state)


def build_objects(definition: TaskDefinition, layout: dict[str, tuple[float, float]]) -> list[ObjectState]:
    objects = []
    for tpl in definition.objects:
        x, y = layout[tpl.id]
        objects.append(
            ObjectState(
                id=tpl.id,
                color=tpl.color,
                shape=tpl.shape,
                position=np.array([x, y, tpl.height / 2], dtype=np.float64),
                height=tpl.height,
            )
        )
    return objects
