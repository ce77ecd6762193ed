"""
Контрольные точки модели: версионированный словарь, сохраняемый ``torch.save``.
"""

import random
from pathlib import Path
from typing import Any

import numpy as np
import torch
from loguru import logger

from emcot_vla import __version__
from emcot_vla.config.configurations import RunConfig, config_from_dict, config_hash
from emcot_vla.model.codec import LatentCodec
from emcot_vla.model.mot import EXPERTS, MoTPolicy
from emcot_vla.utils.errors import ConfigurationError, InputError

FORMAT_VERSION = 1


def rng_state() -> dict[str, Any]:
    return {
        "torch": torch.get_rng_state(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
    }


def restore_rng_state(state: dict[str, Any]) -> None:
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])


def save_checkpoint(
    path: Path | str,
    model: MoTPolicy,
    config: RunConfig,
    codec: LatentCodec | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    scheduler: Any = None,
    step: int = 0,
    regime: str = "",
    extra: dict[str, Any] | None = None,
) -> Path:
    """
    Сохранение контрольной точки.

    Parameters
    ----------
    path : Path | str
        Путь к файлу.
    model : MoTPolicy
        Модель; параметры сохраняются по группам экспертов.
    config : RunConfig
        Конфигурация запуска (сохраняется вместе с хешем).
    codec : LatentCodec | None
        Замороженный кодек.
    optimizer, scheduler
        Состояние оптимизации для продолжения обучения.
    step : int
        Номер шага обучения.
    regime : str
        Стадия и режим обучения, например ``finetune/full``.
    extra : dict | None
        Дополнительные поля (состояние смеси источников, история потерь).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    groups = model.expert_state_dicts()
    payload = {
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "experts": {name: groups[name] for name in EXPERTS},
        "shared": groups["shared"],
        "codec": None if codec is None else codec.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "scheduler": None if scheduler is None else scheduler.state_dict(),
        "rng": rng_state(),
        "step": int(step),
        "regime": regime,
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    logger.info("Контрольная точка сохранена: {} (шаг {})", path, step)
    return path


def read_checkpoint(path: Path | str) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"Контрольная точка не найдена: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise InputError(f"Неподдерживаемый формат контрольной точки: {path}")
    return payload


def load_checkpoint(
    path: Path | str,
    config: RunConfig | None = None,
) -> tuple[MoTPolicy, LatentCodec | None, dict[str, Any]]:
    """
    Загрузка модели и кодека.

    Если передана конфигурация, секция ``model`` должна совпадать с
    сохранённой, иначе ``ConfigurationError``; расхождение остальных секций
    только отмечается предупреждением.

    Returns
    -------
    tuple[MoTPolicy, LatentCodec | None, dict]
        Модель, кодек (если сохранён) и полный словарь контрольной точки.
    """
    payload = read_checkpoint(path)
    saved = config_from_dict(payload["config"])
    if config is not None and config.to_dict()["model"] != payload["config"]["model"]:
        diff = sorted(
            key
            for key, value in config.to_dict()["model"].items()
            if payload["config"]["model"].get(key) != value
        )
        raise ConfigurationError(f"Контрольная точка несовместима с конфигурацией: различаются {diff}")
    if config is not None and payload.get("config_hash") != config_hash(config):
        logger.warning(
            "Хеш конфигурации контрольной точки {} отличается от текущего {}",
            str(payload.get("config_hash", ""))[:8],
            config_hash(config)[:8],
        )

    model = MoTPolicy(saved.model)
    state = dict(payload["shared"])
    for name in EXPERTS:
        state.update(payload["experts"][name])
    model.load_state_dict(state)

    codec = None
    if payload["codec"] is not None:
        codec = LatentCodec(saved.model)
        codec.load_state_dict(payload["codec"])
        codec.freeze()
    return model, codec, payload
