"""
Состояние настольной сцены и её отрисовка сверху.

Оси мира: x — вперёд от робота, y — влево, z — вверх. Позиция объекта — его центр.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from emcot_vla.config.configurations import EnvConfig

ARMS = ("left", "right")

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (215, 45, 45),
    "blue": (45, 85, 215),
    "green": (45, 165, 65),
    "yellow": (225, 200, 45),
    "purple": (135, 60, 165),
    "orange": (235, 135, 35),
    "cyan": (45, 195, 205),
    "gray": (110, 110, 110),
    "pink": (235, 130, 180),
    "brown": (130, 85, 45),
    "white": (245, 245, 245),
}

DISTRACTOR_COLORS = ("pink", "brown", "white")
GRASPABLE_SHAPES = frozenset({"block", "ball"})
BASE_BACKGROUND = (190, 190, 190)


@dataclass
class ObjectState:
    """
    Объект на столе.

    Parameters
    ----------
    id : str
        Идентификатор, например ``red_block``.
    color, shape : str
        Теги цвета и формы.
    position : np.ndarray
        Центр объекта (x, y, z).
    height : float
        Высота объекта.
    active : bool
        Для кнопок: нажата ли кнопка.
    distractor : bool
        Отвлекающий объект уровня hard.
    """

    id: str
    color: str
    shape: str
    position: np.ndarray
    height: float
    active: bool = False
    distractor: bool = False

    @property
    def graspable(self) -> bool:
        return self.shape in GRASPABLE_SHAPES

    @property
    def top(self) -> float:
        return float(self.position[2] + self.height / 2)


@dataclass
class ArmState:
    ee: np.ndarray
    gripper: float = 1.0
    held: str | None = None


@dataclass
class WorldState:
    objects: list[ObjectState]
    arms: dict[str, ArmState]
    step: int = 0
    background: tuple[int, int, int] = BASE_BACKGROUND
    texture: float = 0.0
    render_seed: int = 0

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    def object(self, object_id: str) -> ObjectState:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(f"Объект не найден: {object_id}")

    def has_object(self, object_id: str) -> bool:
        return any(obj.id == object_id for obj in self.objects)

    def holder_of(self, object_id: str) -> str | None:
        for name, arm in self.arms.items():
            if arm.held == object_id:
                return name
        return None

    def proprio(self) -> np.ndarray:
        """
        Вектор проприоцепции (P^l, G^l, P^r, G^r) в мировой системе координат.
        """
        left, right = self.arms["left"], self.arms["right"]
        return np.concatenate(
            [left.ee, [left.gripper], right.ee, [right.gripper]]
        ).astype(np.float64)


@dataclass(frozen=True)
class Observation:
    image: np.ndarray
    proprio: np.ndarray = field(repr=False)


def _pixel_grid(config: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    size = config.image_size
    scale = config.table_size / size
    centers = (np.arange(size) + 0.5) * scale
    # строка изображения растёт к роботу, столбец растёт вправо (к -y)
    wx = (config.table_size - centers)[:, None].repeat(size, axis=1)
    wy = (config.table_size - centers)[None, :].repeat(size, axis=0)
    return wx, wy


def _shade(color: tuple[int, int, int], factor: float) -> np.ndarray:
    return np.clip(np.asarray(color, dtype=np.float64) * factor, 0, 255)


def render(state: WorldState, config: EnvConfig) -> np.ndarray:
    """
    Отрисовка сцены сверху.

    Изображение детерминировано при заданных состоянии и ``render_seed``.

    Parameters
    ----------
    state : WorldState
        Состояние сцены.
    config : EnvConfig
        Параметры среды (разрешение и размер стола).

    Returns
    -------
    np.ndarray
        RGB-изображение uint8 формы (H, W, 3).
    """
    size = config.image_size
    wx, wy = _pixel_grid(config)
    canvas = np.empty((size, size, 3), dtype=np.float64)
    canvas[:] = np.asarray(state.background, dtype=np.float64)
    if state.texture > 0:
        rng = np.random.default_rng(state.render_seed)
        canvas += rng.uniform(-state.texture, state.texture, size=(size, size, 1))

    for obj in sorted(state.objects, key=lambda o: (o.position[2], o.id)):
        x, y, z = obj.position
        dx, dy = wx - x, wy - y
        color = COLORS[obj.color]
        match obj.shape:
            case "zone":
                inner = (np.abs(dx) <= 1.2) & (np.abs(dy) <= 1.2)
                outer = (np.abs(dx) <= 1.5) & (np.abs(dy) <= 1.5)
                canvas[outer & ~inner] = color
            case "plate":
                canvas[dx**2 + dy**2 <= 1.2**2] = _shade(color, 1.15)
            case "button":
                factor = 0.55 if obj.active else 1.0
                canvas[dx**2 + dy**2 <= 0.5**2] = _shade(color, factor)
            case "ball":
                canvas[dx**2 + dy**2 <= 0.6**2] = _shade(color, 1.0 + 0.08 * z)
            case _:
                mask = (np.abs(dx) <= 0.6) & (np.abs(dy) <= 0.6)
                canvas[mask] = _shade(color, 1.0 + 0.08 * z)

    arm_colors = {"left": (20, 20, 20), "right": (250, 250, 250)}
    for name in ARMS:
        arm = state.arms[name]
        dx, dy = wx - arm.ee[0], wy - arm.ee[1]
        if arm.gripper < 0.5:
            mask = (np.abs(dx) <= 0.35) & (np.abs(dy) <= 0.35)
        else:
            mask = ((np.abs(dx) <= 0.15) & (np.abs(dy) <= 0.55)) | (
                (np.abs(dy) <= 0.15) & (np.abs(dx) <= 0.55)
            )
        canvas[mask] = arm_colors[name]

    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def observe(state: WorldState, config: EnvConfig) -> Observation:
    return Observation(image=render(state, config), proprio=state.proprio())
