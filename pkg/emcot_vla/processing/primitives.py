from dataclasses import InitVar, dataclass, field
from pathlib import Path
from typing import ClassVar

import numpy as np
import pandas as pd

from emcot_vla.config.configurations import Thresholds
from emcot_vla.utils.errors import InputError
from emcot_vla.utils.io import read_jsonl, write_jsonl
from emcot_vla.utils.mappings import AXIS_NAMES, lookup_sentence

ARM_SLOTS = {"left": 0, "right": 4}


def is_idle(
    p_t: np.ndarray, p_prev: np.ndarray, g_t: float, g_prev: float, thresholds: Thresholds
) -> bool:
    """
    Признак покоя руки на кадре: ‖P_t − P_prev‖ < θ_vel и |G_t − G_prev| < θ_dg.

    Оба неравенства строгие, поэтому смещение ровно на порог покоем не считается.
    """
    values = np.concatenate([np.ravel(p_t), np.ravel(p_prev), [g_t, g_prev]]).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise InputError("Проприоцепция содержит NaN или бесконечность")
    displacement = float(np.linalg.norm(np.asarray(p_t, dtype=np.float64) - np.asarray(p_prev, dtype=np.float64)))
    return displacement < thresholds.theta_vel and abs(float(g_t) - float(g_prev)) < thresholds.theta_dg


def segment_actions(idle_flags: list[bool] | np.ndarray, theta_min_idle: int) -> list[tuple[int, int]]:
    """
    Сегменты движения, разделённые паузами длиной не меньше ``theta_min_idle``.

    Паузы короче порога поглощаются окружающим сегментом; покой в начале
    и в конце последовательности в сегменты не входит.

    Parameters
    ----------
    idle_flags : list[bool]
        Признаки покоя по кадрам.
    theta_min_idle : int
        Минимальная длина разделяющей паузы.

    Returns
    -------
    list[tuple[int, int]]
        Пары (начало, конец) включительно, отсортированные и непересекающиеся.
    """
    flags = [bool(f) for f in idle_flags]
    if not flags:
        raise InputError("Пустая последовательность признаков покоя")

    runs: list[list[int]] = []
    t = 0
    while t < len(flags):
        if flags[t]:
            t += 1
            continue
        start = t
        while t < len(flags) and not flags[t]:
            t += 1
        runs.append([start, t - 1])

    segments: list[list[int]] = []
    for start, end in runs:
        if segments and start - segments[-1][1] - 1 < theta_min_idle:
            segments[-1][1] = end
        else:
            segments.append([start, end])
    return [(s, e) for s, e in segments]


def get_direction(delta: np.ndarray, theta_dir: float, theta_vel: float) -> str:
    """
    Доминирующие оси смещения, например ``forward-left``.

    Ось i входит в направление, если |ΔP_i| ≥ θ_dir·max|ΔP|; при max|ΔP| < θ_vel
    возвращается ``stationary``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    magnitude = np.abs(delta)
    peak = float(magnitude.max())
    if peak < theta_vel:
        return "stationary"
    names = [
        AXIS_NAMES[axis][0] if delta[axis] > 0 else AXIS_NAMES[axis][1]
        for axis in range(3)
        if magnitude[axis] >= theta_dir * peak
    ]
    return "-".join(names)


def idle_flags_for_arm(proprio: np.ndarray, arm: str, thresholds: Thresholds) -> list[bool]:
    slot = ARM_SLOTS[arm]
    positions, gripper = proprio[:, slot : slot + 3], proprio[:, slot + 3]
    flags = [True]
    for t in range(1, len(proprio)):
        flags.append(is_idle(positions[t], positions[t - 1], gripper[t], gripper[t - 1], thresholds))
    return flags


def _runs(mask: list[bool], start: int, end: int) -> list[tuple[int, int]]:
    out = []
    t = start
    while t <= end:
        if not mask[t]:
            t += 1
            continue
        s = t
        while t <= end and mask[t]:
            t += 1
        out.append((s, t - 1))
    return out


def label_arm(proprio: np.ndarray, arm: str, thresholds: Thresholds) -> list[tuple[str, str]]:
    """
    Разметка одной руки: список (вид, направление) по кадрам.

    Сначала внутри сегментов отмечаются смены раскрытия (grasp/release), затем
    подотрезки движения перезаписываются меткой ``move``.
    """
    slot = ARM_SLOTS[arm]
    positions, gripper = proprio[:, slot : slot + 3], proprio[:, slot + 3]
    flags = idle_flags_for_arm(proprio, arm, thresholds)
    labels = [("idle", "")] * len(proprio)

    for s, e in segment_actions(flags, thresholds.theta_min_idle):
        for t in range(max(1, s), e + 1):
            dg = gripper[t] - gripper[t - 1]
            if dg <= -thresholds.theta_dg:
                labels[t] = ("grasp", "")
            elif dg >= thresholds.theta_dg:
                labels[t] = ("release", "")

        if thresholds.literal_idle_subsegments:
            # подотрезки покоя внутри сегмента, смещение суммируется по кадрам s'+1..e'
            for s_sub, e_sub in _runs(flags, s, e):
                delta = positions[e_sub] - positions[s_sub]
                direction = get_direction(delta, thresholds.theta_dir, thresholds.theta_vel)
                for t in range(s_sub, e_sub + 1):
                    labels[t] = ("move", direction)
            continue

        moving = [False] + [
            bool(np.linalg.norm(positions[t] - positions[t - 1]) >= thresholds.theta_vel)
            for t in range(1, len(proprio))
        ]
        for s_sub, e_sub in _runs(moving, max(1, s), e):
            delta = positions[e_sub] - positions[s_sub - 1]
            direction = get_direction(delta, thresholds.theta_dir, thresholds.theta_vel)
            for t in range(s_sub, e_sub + 1):
                labels[t] = ("move", direction)
    return labels


@dataclass
class PrimitiveTable:
    """
    Таблица примитивов траектории: по строке на пару (кадр, рука).

    Parameters
    ----------
    proprio : InitVar[np.ndarray]
        Проприоцепция формы (T, 8).
    thresholds : Thresholds
        Пороги извлечения.
    trajectory_id : str
        Идентификатор траектории для столбца ``trajectory_id``.
    """

    proprio: InitVar[np.ndarray]
    thresholds: Thresholds = field(default_factory=Thresholds)
    trajectory_id: str = ""
    df: pd.DataFrame | None = field(init=False, default=None)

    COLUMNS: ClassVar[list[str]] = ["trajectory_id", "frame", "arm", "kind", "direction", "sentence"]

    def __post_init__(self, proprio: np.ndarray) -> None:
        proprio = np.asarray(proprio, dtype=np.float64)
        if proprio.ndim != 2 or proprio.shape[1] != 8:
            raise InputError(f"Ожидалась проприоцепция формы (T, 8), получено {proprio.shape}")
        if len(proprio) < 2:
            raise InputError("Траектория должна содержать не меньше двух кадров")

        rows = []
        per_arm = {arm: label_arm(proprio, arm, self.thresholds) for arm in ARM_SLOTS}
        for t in range(len(proprio)):
            for arm in ARM_SLOTS:
                kind, direction = per_arm[arm][t]
                rows.append(
                    [self.trajectory_id, t, arm, kind, direction, lookup_sentence(kind, direction)]
                )
        self.df = pd.DataFrame(rows, columns=self.COLUMNS)

    def kinds(self, arm: str) -> list[str]:
        if arm not in ARM_SLOTS:
            raise InputError(f"Неизвестная рука: {arm}")
        return self.df.loc[self.df["arm"] == arm, "kind"].tolist()

    def frame_sentences(self) -> list[dict[str, str]]:
        """
        Предложения обеих рук по кадрам: [{"left": ..., "right": ...}, ...].
        """
        pivot = self.df.pivot(index="frame", columns="arm", values="sentence")
        return [{arm: pivot.at[t, arm] for arm in ARM_SLOTS} for t in pivot.index]

    def active_frames(self) -> list[bool]:
        """
        Кадры, на которых хотя бы одна рука не покоится.
        """
        active = self.df.groupby("frame")["kind"].agg(lambda kinds: any(k != "idle" for k in kinds))
        return active.sort_index().tolist()


def extract_primitives(
    proprio: np.ndarray | dict[str, np.ndarray],
    thresholds: Thresholds | None = None,
    trajectory_id: str = "",
) -> PrimitiveTable:
    """
    Разметка примитивов по проприоцепции.

    Parameters
    ----------
    proprio : np.ndarray | dict
        Массив (T, 8) либо словарь с ключами ``left``/``right`` и массивами (T, 4).
    thresholds : Thresholds
        Пороги извлечения.
    trajectory_id : str
        Идентификатор траектории.

    Returns
    -------
    PrimitiveTable
        Таблица меток.
    """
    if isinstance(proprio, dict):
        missing = [arm for arm in ARM_SLOTS if arm not in proprio]
        if missing:
            raise InputError(f"Нет данных руки: {missing}")
        proprio = np.concatenate(
            [np.asarray(proprio["left"], dtype=np.float64), np.asarray(proprio["right"], dtype=np.float64)],
            axis=1,
        )
    return PrimitiveTable(proprio, thresholds or Thresholds(), trajectory_id)


def summarize_primitives(table: PrimitiveTable) -> pd.DataFrame:
    """
    Сводка серий одинаковых меток по каждой руке.

    Returns
    -------
    pd.DataFrame
        Столбцы: arm, kind, direction, sentence, start, end.
    """
    df = table.df
    out = []
    for arm, group in df.groupby("arm", sort=False):
        key = group["kind"] + "|" + group["direction"]
        run_id = (key != key.shift()).cumsum()
        for _, run in group.groupby(run_id, sort=True):
            first = run.iloc[0]
            out.append(
                [arm, first["kind"], first["direction"], first["sentence"], int(run["frame"].min()), int(run["frame"].max())]
            )
    return pd.DataFrame(out, columns=["arm", "kind", "direction", "sentence", "start", "end"])


def write_labels(path: Path | str, tables: list[PrimitiveTable], stamp: dict[str, str]) -> Path:
    """
    Файл меток JSON-lines: по строке на (траектория, кадр, рука) с хешем конфигурации.
    """
    rows = (
        {**record, **stamp}
        for table in tables
        for record in table.df.to_dict(orient="records")
    )
    return write_jsonl(path, rows)


def read_labels(path: Path | str) -> pd.DataFrame:
    return pd.DataFrame(list(read_jsonl(path)))
