from dataclasses import dataclass, field
from typing import Any

import numpy as np

ROLES = ("text", "vis_und", "vis_clean", "vis_noise", "act_noise")
NOISE_ROLES = frozenset({"vis_noise", "act_noise"})
VISUAL_ROLES = frozenset({"vis_und", "vis_clean"})
ROLE_CODES = {role: i for i, role in enumerate(ROLES)}


@dataclass(slots=True)
class TokenRecord:
    """
    Типизированная запись последовательности.

    Parameters
    ----------
    role : str
        Одна из ``ROLES``.
    payload : int | np.ndarray | None
        Идентификатор токена, вектор патча/латента или вектор шума.
    frame : int | None
        Номер кадра внутри образца (для визуальных ролей).
    group : int | None
        Номер шумовой группы (для шумовых ролей).
    target_frame : int | None
        Кадр, чьи чистые латенты являются целью шумовой группы.
    loss : bool
        Участвует ли запись в функции потерь.
    target : int | np.ndarray | None
        Цель для записей с потерями.
    sample : int
        Номер образца внутри упаковки.
    position : int
        Позиция внутри образца.
    """

    role: str
    payload: Any = None
    frame: int | None = None
    group: int | None = None
    target_frame: int | None = None
    loss: bool = False
    target: Any = None
    sample: int = 0
    position: int = 0

    def __post_init__(self):
        if self.role not in ROLE_CODES:
            raise ValueError(f"Неизвестная роль записи: {self.role}")
        if self.role in NOISE_ROLES and self.group is None:
            raise ValueError("Шумовая запись должна иметь номер группы")
        if self.loss and self.target is None:
            raise ValueError("Запись с потерями должна иметь цель")

    @property
    def is_noise(self) -> bool:
        return self.role in NOISE_ROLES


@dataclass
class Sample:
    """
    Собранный образец одного вида (``emcot``, ``vqa``, ``vg``, ``ap``).
    """

    sample_id: str
    kind: str
    records: list[TokenRecord]
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for position, record in enumerate(self.records):
            record.position = position

    def __len__(self) -> int:
        return len(self.records)

    def roles(self) -> list[str]:
        return [record.role for record in self.records]


@dataclass
class RecordArrays:
    """
    Поля записей в виде массивов для построения маски и батча.
    """

    sample: np.ndarray
    role: np.ndarray
    frame: np.ndarray
    group: np.ndarray
    target_frame: np.ndarray
    position: np.ndarray

    @classmethod
    def from_records(cls, records: list[TokenRecord], samples: list[int] | None = None) -> "RecordArrays":
        def column(values):
            return np.array([-1 if v is None else v for v in values], dtype=np.int64)

        return cls(
            sample=column(samples if samples is not None else [r.sample for r in records]),
            role=column([ROLE_CODES[r.role] for r in records]),
            frame=column([r.frame for r in records]),
            group=column([r.group for r in records]),
            target_frame=column([r.target_frame for r in records]),
            position=column([r.position for r in records]),
        )

    def __len__(self) -> int:
        return len(self.role)
