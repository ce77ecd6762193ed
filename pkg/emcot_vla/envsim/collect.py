"""
Сбор экспертных траекторий и их хранение в формате JSON-lines.
"""

import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from loguru import logger
from tqdm import tqdm

from emcot_vla import __version__
from emcot_vla.config.configurations import EnvConfig
from emcot_vla.envsim.env import hold_action, reset, step
from emcot_vla.envsim.expert import ScriptedExpert
from emcot_vla.envsim.tasks import TaskSpec, is_success, make_task, task_from_dict
from emcot_vla.envsim.world import Observation
from emcot_vla.utils.errors import ExpertRefusal, InputError
from emcot_vla.utils.io import decode_png, dumps_line, encode_png, read_jsonl

MIN_EXPERT_SUCCESS = 0.95


@dataclass
class Trajectory:
    """
    Экспертная траектория τ = {(o_t, l, a_t)}.

    Последний кадр содержит тождественное действие, так что число действий
    равно числу наблюдений.

    Parameters
    ----------
    task : TaskSpec
        Задача и инструкция l.
    seed : int
        Зерно сброса среды.
    observations : list[Observation]
        Наблюдения o_0..o_{T-1}.
    actions : np.ndarray
        Действия формы (T, 8).
    success : bool
        Итог по предикату успеха.
    boundaries : list[dict]
        Кадры начала подзадач по данным эксперта.
    plan : list[str]
        План подзадач эксперта.
    """

    task: TaskSpec
    seed: int
    observations: list[Observation]
    actions: np.ndarray
    success: bool
    boundaries: list[dict] = field(default_factory=list)
    plan: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if len(self.observations) < 2:
            raise InputError("Траектория должна содержать не меньше двух кадров")
        if self.actions.shape != (len(self.observations), 8):
            raise InputError(
                f"Форма действий {self.actions.shape} не согласована с {len(self.observations)} кадрами"
            )

    @property
    def trajectory_id(self) -> str:
        return f"{self.task.task_id}-{self.task.level}-{self.seed:05d}"

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def proprio(self) -> np.ndarray:
        return np.stack([obs.proprio for obs in self.observations])

    @property
    def images(self) -> np.ndarray:
        return np.stack([obs.image for obs in self.observations])

    def subtask_ranges(self) -> list[tuple[str, int, int]]:
        """
        Диапазоны подзадач [start, end] включительно, покрывающие все кадры.
        """
        out = []
        for i, boundary in enumerate(self.boundaries):
            end = self.boundaries[i + 1]["start"] - 1 if i + 1 < len(self.boundaries) else len(self) - 1
            out.append((boundary["subtask"], int(boundary["start"]), int(end)))
        return out


def collect_trajectory(task: TaskSpec, seed: int, config: EnvConfig | None = None) -> Trajectory | None:
    """
    Сброс среды и исполнение эксперта до завершения эпизода.

    Parameters
    ----------
    task : TaskSpec
        Задача.
    seed : int
        Зерно сброса.
    config : EnvConfig
        Параметры среды.

    Returns
    -------
    Trajectory | None
        Траектория или None, если эксперт отказался или не решил задачу
        (причина пишется в журнал).
    """
    config = config or EnvConfig()
    state, obs = reset(task, seed, config)
    observations, actions = [obs], []
    try:
        expert = ScriptedExpert(task, state, config)
        done = False
        while not done:
            action = expert.act(state)
            state, obs, done = step(state, action, task, config)
            actions.append(action)
            observations.append(obs)
    except ExpertRefusal as exc:
        logger.warning("Траектория {}-{}-{} отброшена: {}", task.task_id, task.level, seed, exc)
        return None

    if not is_success(task, state):
        logger.warning(
            "Траектория {}-{}-{} отброшена: лимит шагов {} исчерпан",
            task.task_id, task.level, seed, config.step_limit,
        )
        return None

    actions.append(hold_action(state))
    expert.frame_subtasks.append(expert.frame_subtasks[-1])
    return Trajectory(
        task=task,
        seed=seed,
        observations=observations,
        actions=np.stack(actions),
        success=True,
        boundaries=[{"subtask": b["subtask"], "start": b["start"]} for b in expert.boundaries()],
        plan=expert.plan,
    )


def _collect_job(task_id: str, level: str, seed: int, config: EnvConfig) -> Trajectory | None:
    return collect_trajectory(make_task(task_id, level), seed, config)


def collect_dataset(
    tasks: Iterable[str],
    seeds: Iterable[int],
    levels: Iterable[str] = ("easy",),
    config: EnvConfig | None = None,
    workers: int = 1,
) -> tuple[list[Trajectory], dict[str, float]]:
    """
    Сбор траекторий по фиксированному списку зёрен.

    Порядок результатов совпадает с порядком (задача, уровень, зерно) независимо
    от числа процессов.

    Returns
    -------
    tuple[list[Trajectory], dict]
        Успешные траектории и статистика (попытки, успехи, доля успеха).
    """
    config = config or EnvConfig()
    jobs = [(task_id, level, int(seed), config) for task_id in tasks for level in levels for seed in seeds]
    if workers > 1:
        with multiprocessing.Pool(processes=workers) as pool:
            results = pool.starmap(_collect_job, jobs)
    else:
        results = [_collect_job(*job) for job in tqdm(jobs, desc="Сбор траекторий", leave=False)]

    trajectories = [traj for traj in results if traj is not None]
    rate = len(trajectories) / len(jobs) if jobs else 1.0
    stats = {"attempted": len(jobs), "succeeded": len(trajectories), "success_rate": rate}
    logger.info("Собрано траекторий: {} из {} (доля успеха {:.3f})", len(trajectories), len(jobs), rate)
    if rate < MIN_EXPERT_SUCCESS:
        logger.warning("Доля успеха эксперта {:.3f} ниже порога {}", rate, MIN_EXPERT_SUCCESS)
    return trajectories, stats


def write_trajectory(
    path: Path | str, traj: Trajectory, stamp: dict[str, str], image_format: str = "png"
) -> Path:
    """
    Запись траектории: строка-заголовок и по строке на кадр.

    При ``image_format="blob"`` изображения пишутся подряд в соседний файл ``.bin``,
    а в строке кадра хранится смещение.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_shape = list(traj.observations[0].image.shape)
    header = {
        "kind": "header",
        "trajectory_id": traj.trajectory_id,
        "task": traj.task.to_dict(),
        "seed": traj.seed,
        "config_hash": stamp.get("config_hash", ""),
        "tool_version": stamp.get("tool_version", __version__),
        "boundaries": traj.boundaries,
        "plan": traj.plan,
        "success": traj.success,
        "length": len(traj),
        "image_format": image_format,
        "image_shape": image_shape,
    }
    blob = bytearray()
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_line(header) + "\n")
        for t, (obs, action) in enumerate(zip(traj.observations, traj.actions)):
            row = {
                "kind": "frame",
                "t": t,
                "proprio": [float(v) for v in obs.proprio],
                "action": [float(v) for v in action],
            }
            if image_format == "blob":
                row["blob_offset"] = len(blob)
                blob.extend(np.ascontiguousarray(obs.image, dtype=np.uint8).tobytes())
            else:
                row["image"] = encode_png(obs.image)
            f.write(dumps_line(row) + "\n")
    if image_format == "blob":
        path.with_suffix(".bin").write_bytes(bytes(blob))
    return path


def read_trajectory(path: Path | str) -> tuple[Trajectory, dict]:
    """
    Чтение траектории, записанной ``write_trajectory``.

    Returns
    -------
    tuple[Trajectory, dict]
        Траектория и заголовок файла.
    """
    path = Path(path)
    rows = list(read_jsonl(path))
    if not rows or rows[0].get("kind") != "header":
        raise InputError(f"Файл {path} не содержит заголовка траектории")
    header, frames = rows[0], rows[1:]
    shape = tuple(header["image_shape"])
    blob = path.with_suffix(".bin").read_bytes() if header["image_format"] == "blob" else b""
    size = int(np.prod(shape))

    observations, actions = [], []
    for row in frames:
        if header["image_format"] == "blob":
            offset = row["blob_offset"]
            image = np.frombuffer(blob[offset : offset + size], dtype=np.uint8).reshape(shape).copy()
        else:
            image = decode_png(row["image"])
        observations.append(Observation(image=image, proprio=np.asarray(row["proprio"], dtype=np.float64)))
        actions.append(row["action"])

    traj = Trajectory(
        task=task_from_dict(header["task"]),
        seed=int(header["seed"]),
        observations=observations,
        actions=np.asarray(actions, dtype=np.float64),
        success=bool(header["success"]),
        boundaries=header["boundaries"],
        plan=header["plan"],
    )
    return traj, header


def save_dataset(
    trajectories: Iterable[Trajectory], out_dir: Path | str, stamp: dict[str, str], image_format: str = "png"
) -> list[Path]:
    out_dir = Path(out_dir)
    return [
        write_trajectory(out_dir / f"{traj.trajectory_id}.jsonl", traj, stamp, image_format)
        for traj in trajectories
    ]


def load_dataset(paths: Iterable[Path | str]) -> list[Trajectory]:
    return [read_trajectory(path)[0] for path in paths]
