"""
Источники обучающих образцов и детерминированное смешивание.
"""

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from loguru import logger

from emcot_vla.envsim.collect import Trajectory
from emcot_vla.processing.annotator import EMCoTRecord
from emcot_vla.processing.vqa import VQASample
from emcot_vla.tokenstream.assemble import SequenceBuilder, ap_sample, vg_sample
from emcot_vla.tokenstream.records import Sample
from emcot_vla.utils.errors import InputError

SOURCE_KINDS = ("emcot", "vqa", "vg", "ap")


@dataclass
class MixtureScheduler:
    """
    Смешивание источников по круговой схеме с учётом недостачи: на каждом
    шаге каждому источнику начисляется его доля, выбирается источник с
    наибольшим накоплением, и с него списывается единица. Реальные частоты
    совпадают с заданными долями с точностью до одного образца.
    """

    ratios: dict[str, float]
    credit: dict[str, float] = field(init=False)
    counts: dict[str, int] = field(init=False)

    def __post_init__(self):
        active = {kind: float(r) for kind, r in self.ratios.items() if r > 0}
        if not active:
            raise InputError("В смеси нет ни одного источника с положительной долей")
        total = sum(active.values())
        self._weights = {kind: r / total for kind, r in active.items()}
        self.credit = {kind: 0.0 for kind in self._weights}
        self.counts = {kind: 0 for kind in self._weights}

    @property
    def kinds(self) -> list[str]:
        return list(self._weights)

    def next(self) -> str:
        for kind, weight in self._weights.items():
            self.credit[kind] += weight
        pick = max(self._weights, key=lambda kind: self.credit[kind])
        self.credit[pick] -= 1.0
        self.counts[pick] += 1
        return pick

    def frequencies(self) -> dict[str, float]:
        total = sum(self.counts.values())
        return {kind: count / total if total else 0.0 for kind, count in self.counts.items()}

    def state_dict(self) -> dict[str, Any]:
        return {"credit": dict(self.credit), "counts": dict(self.counts)}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self.credit = {kind: float(v) for kind, v in state["credit"].items()}
        self.counts = {kind: int(v) for kind, v in state["counts"].items()}


@dataclass
class TrainingCorpus:
    """
    Набор источников для стадии обучения.

    Parameters
    ----------
    builder : SequenceBuilder
        Сборщик последовательностей.
    trajectories : list[Trajectory]
        Экспертные траектории (источники VG, AP и EM-CoT).
    records : list[EMCoTRecord]
        Аннотации траекторий; сопоставляются по ``trajectory_id``.
    vqa : list[VQASample]
        Вопросы и ответы по сценам.
    emcot_mode : str
        Режим раскладки образцов EM-CoT.
    seed : int
        Зерно выбора образцов.
    """

    builder: SequenceBuilder
    trajectories: list[Trajectory] = field(default_factory=list)
    records: list[EMCoTRecord] = field(default_factory=list)
    vqa: list[VQASample] = field(default_factory=list)
    emcot_mode: str = "full"
    seed: int = 0

    def __post_init__(self):
        by_id = {traj.trajectory_id: i for i, traj in enumerate(self.trajectories)}
        emcot = []
        for r, record in enumerate(self.records):
            if record.trajectory_id not in by_id:
                logger.warning("Аннотация {} без траектории пропущена", record.trajectory_id)
                continue
            emcot.extend((r, by_id[record.trajectory_id], t) for t in range(len(record)))
        frames = [(i, t) for i, traj in enumerate(self.trajectories) for t in range(len(traj))]
        self._index: dict[str, list] = {
            "emcot": emcot,
            "vqa": list(range(len(self.vqa))),
            "vg": frames,
            "ap": frames,
        }
        self._rng = np.random.default_rng(self.seed)

    def available(self, kind: str) -> int:
        return len(self._index[kind])

    def check(self, kinds: list[str]) -> None:
        empty = [kind for kind in kinds if not self.available(kind)]
        if empty:
            raise InputError(f"Нет данных для источников смеси: {empty}")

    def sample(self, kind: str, index: int) -> Sample:
        """
        Образец источника ``kind`` по номеру в его перечне.
        """
        config = self.builder.model_config
        tokens = self.builder.token_config
        match kind:
            case "emcot":
                r, i, t = self._index["emcot"][index]
                return self.builder.assemble_emcot_sequence(self.records[r], self.trajectories[i], t, self.emcot_mode)
            case "vqa":
                return self.builder.assemble_pretrain_sequence(self.vqa[index])
            case "vg":
                i, t = self._index["vg"][index]
                return self.builder.assemble_pretrain_sequence(
                    vg_sample(self.trajectories[i], t, tokens.vg_context, tokens.vg_horizon)
                )
            case "ap":
                i, t = self._index["ap"][index]
                return self.builder.assemble_pretrain_sequence(
                    ap_sample(self.trajectories[i], t, config.context_frames, config.chunk)
                )
        raise InputError(f"Неизвестный источник: {kind}")

    def draw(self, kind: str) -> Sample:
        count = self.available(kind)
        if not count:
            raise InputError(f"Источник {kind} пуст")
        return self.sample(kind, int(self._rng.integers(count)))

    def batch(self, mixture: MixtureScheduler, size: int) -> list[Sample]:
        return [self.draw(mixture.next()) for _ in range(size)]

    def state_dict(self) -> dict[str, Any]:
        return {"rng": self._rng.bit_generator.state}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self._rng.bit_generator.state = state["rng"]
