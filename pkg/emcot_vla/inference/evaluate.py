"""
Оценка политики на наборе задач и таблицы абляций.
"""

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd
from loguru import logger
from PIL import Image
from tqdm import tqdm

from emcot_vla.config.configurations import (
    Config,
    EvalConfig,
    ReportConfig,
    RunConfig,
    ablation_report_style,
    config_hash,
    evaluation_report_style,
)
from emcot_vla.envsim.tasks import make_task
from emcot_vla.inference.rollout import EMCoTPolicy, EpisodeRecord, run_episode
from emcot_vla.utils.io import Writer, write_json

EMCOT_ROWS = {"full": "full", "no_text": "w/o T", "no_vis": "w/o V", "none": "w/o V & T"}
RECIPE_ROWS = {
    "full": "VG+VQA+AP",
    "no_vg": "w/o VG",
    "no_vg_vqa": "w/o VG+VQA",
    "no_pretrain": "no pre-training",
}
RECIPE_MIXTURES = {
    "full": {"vqa": 1.0, "vg": 1.0, "ap": 2.0},
    "no_vg": {"vqa": 1.0, "vg": 0.0, "ap": 2.0},
    "no_vg_vqa": {"vqa": 0.0, "vg": 0.0, "ap": 1.0},
    "no_pretrain": None,
}


def seed_schedule(config: EvalConfig) -> list[int]:
    """
    Зёрна эпизодов: base_seed + i; одинаковы для всех уровней и строк абляций.
    """
    return [config.base_seed + i for i in range(config.episodes)]


@dataclass
class RolloutReport:
    """
    Эпизоды оценки и доли успеха по задачам и уровням.
    """

    episodes: list[EpisodeRecord] = field(default_factory=list)
    mode: str = "full"
    wall_clock: float = 0.0

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"task": e.task_id, "level": e.level, "seed": e.seed, "success": e.success, "valid": e.valid}
                for e in self.episodes
            ],
            columns=["task", "level", "seed", "success", "valid"],
        )

    def rates(self) -> pd.DataFrame:
        """
        Доли успеха по (задача, уровень); недействительные эпизоды в знаменатель не входят.
        """
        df = self.frame()
        df["hit"] = df["success"] & df["valid"]
        df["invalid"] = ~df["valid"].astype(bool)
        out = (
            df.groupby(["task", "level"], sort=False)
            .agg(successes=("hit", "sum"), episodes=("valid", "sum"), invalid=("invalid", "sum"))
            .reset_index()
        )
        out[["successes", "episodes", "invalid"]] = out[["successes", "episodes", "invalid"]].astype(int)
        out["rate"] = np.where(out["episodes"] > 0, out["successes"] / out["episodes"].clip(lower=1), np.nan)
        return out

    def table(self, with_mean: bool = True) -> pd.DataFrame:
        """
        Таблица задача x уровень, по умолчанию со строкой среднего.
        """
        rates = self.rates()
        table = rates.pivot(index="task", columns="level", values="rate")
        table = table[[level for level in ("easy", "hard") if level in table.columns]]
        table.columns.name = None
        if with_mean:
            table.loc["mean"] = table.mean(axis=0)
        return table.reset_index()

    def mean_rates(self) -> dict[str, float]:
        rates = self.rates()
        return {level: float(group["rate"].mean()) for level, group in rates.groupby("level")}

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "wall_clock": self.wall_clock,
            "rates": self.rates().to_dict(orient="records"),
            "mean": self.mean_rates(),
            "invalid": int(sum(not e.valid for e in self.episodes)),
            "episodes": [e.to_dict() for e in self.episodes],
        }


def evaluate(
    policy: EMCoTPolicy,
    config: RunConfig,
    mode: str | None = None,
    show_progress: bool = True,
) -> RolloutReport:
    """
    Оценка политики: все задачи x уровни x зёрна расписания.
    """
    rollout = config.rollout
    if mode is not None and mode != rollout.mode:
        rollout = replace(rollout, mode=mode)
    seeds = seed_schedule(config.eval)
    jobs = [(task_id, level, seed) for task_id in config.eval.tasks for level in config.eval.levels for seed in seeds]
    report = RolloutReport(mode=rollout.mode)
    started = time.perf_counter()
    for task_id, level, seed in tqdm(jobs, desc=f"eval {rollout.mode}", disable=not show_progress):
        report.episodes.append(run_episode(policy, make_task(task_id, level), seed, config.env, rollout))
    report.wall_clock = time.perf_counter() - started
    logger.info("Оценка {}: {}", rollout.mode, report.mean_rates())
    return report


def comparison_table(
    rows: dict[str, str],
    reports: dict[str, RolloutReport | None],
    levels: tuple[str, ...],
) -> pd.DataFrame:
    """
    Таблица сравнения: строка на вариант, столбцы уровней и время.
    Отсутствующие варианты остаются пустыми строками.
    """
    data = []
    for key, label in rows.items():
        report = reports.get(key)
        row: dict[str, Any] = {"variant": label}
        means = report.mean_rates() if report is not None else {}
        for level in levels:
            row[level] = means.get(level, np.nan)
        row["wall_clock"] = report.wall_clock if report is not None else np.nan
        data.append(row)
    return pd.DataFrame(data, columns=["variant", *levels, "wall_clock"])


def ablation_suite(
    policies: dict[str, Callable[[], EMCoTPolicy] | None],
    config: RunConfig,
    kind: str = "emcot",
    show_progress: bool = True,
) -> tuple[pd.DataFrame, dict[str, RolloutReport | None]]:
    """
    Абляция: каждая строка оценивается на одном и том же расписании зёрен.

    Parameters
    ----------
    policies : dict
        Вариант -> фабрика политики (или ``None``, если контрольной точки нет).
    kind : str
        ``emcot`` (режимы рассуждения) или ``recipe`` (состав предобучения).
    """
    rows = EMCOT_ROWS if kind == "emcot" else RECIPE_ROWS
    reports: dict[str, RolloutReport | None] = {}
    for key in rows:
        factory = policies.get(key)
        if factory is None:
            logger.warning("Нет контрольной точки для варианта {}: строка останется пустой", key)
            reports[key] = None
            continue
        mode = key if kind == "emcot" else None
        reports[key] = evaluate(factory(), config, mode, show_progress)
    return comparison_table(rows, reports, config.eval.levels), reports


def write_reports(
    report_dict: dict[str, Any],
    table: pd.DataFrame,
    out_dir: Path | str,
    config: RunConfig,
    name: str = "evaluation",
    ablation: bool = False,
) -> dict[str, Path]:
    """
    JSON, Excel-книга и таблица в журнале.
    """
    out_dir = Path(out_dir)
    json_path = write_json(out_dir / f"{name}.json", {**report_dict, "config_hash": config_hash(config)})
    style = ablation_report_style if ablation else evaluation_report_style
    writer = Writer(Config(style, ReportConfig(run_label=config_hash(config)[:8], category=name)), output_dir=out_dir)
    sheet = table[table.iloc[:, 0] != "mean"].drop(columns=["wall_clock"], errors="ignore")
    xlsx_path = writer.export_to_xls(sheet, f"{name}.xlsx")
    logger.info("\n{}", table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return {"json": json_path, "xlsx": xlsx_path}


def dump_episode_grid(record: EpisodeRecord, path: Path | str, columns: int = 8) -> Path | None:
    """
    Сетка изображений подцелей (и исполненных кадров, если сохранены) эпизода.
    """
    images = list(record.subgoals) + list(record.frames)
    if not images:
        return None
    h, w, _ = images[0].shape
    rows = (len(images) + columns - 1) // columns
    grid = Image.new("RGB", (columns * w, rows * h), (255, 255, 255))
    for i, image in enumerate(images):
        grid.paste(Image.fromarray(np.asarray(image, dtype=np.uint8)), ((i % columns) * w, (i // columns) * h))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid.save(path)
    return path
