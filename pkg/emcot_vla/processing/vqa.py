"""
Синтетические вопросы и ответы по сцене: цвет, положение, количество объектов.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from emcot_vla.config.configurations import EnvConfig
from emcot_vla.envsim.env import reset
from emcot_vla.envsim.tasks import make_task
from emcot_vla.envsim.world import WorldState
from emcot_vla.utils.io import decode_png, encode_png, read_jsonl, write_jsonl

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight")


@dataclass
class VQASample:
    sample_id: str
    image: np.ndarray
    question: str
    answer: str

    def to_dict(self) -> dict[str, str]:
        return {
            "sample_id": self.sample_id,
            "image": encode_png(self.image),
            "question": self.question,
            "answer": self.answer,
        }

    @classmethod
    def from_dict(cls, data: dict[str, str]) -> "VQASample":
        return cls(data["sample_id"], decode_png(data["image"]), data["question"], data["answer"])


def scene_questions(state: WorldState) -> list[tuple[str, str]]:
    """
    Все вопросы, однозначно отвечаемые по состоянию сцены.

    Returns
    -------
    list[tuple[str, str]]
        Пары (вопрос, ответ).
    """
    objects = [obj for obj in state.objects if obj.shape != "zone"]
    out = [("how many objects are on the table?", NUMBER_WORDS[min(len(objects), 8)])]

    shapes = [obj.shape for obj in objects]
    for obj in objects:
        if shapes.count(obj.shape) == 1:
            out.append((f"what color is the {obj.shape}?", obj.color))
        side = "left" if obj.position[1] >= 8.0 else "right"
        out.append((f"is the {obj.color} {obj.shape} on the left or the right?", side))
    for name, arm in state.arms.items():
        status = "open" if arm.gripper >= 0.5 else "closed"
        out.append((f"is the {name} gripper open or closed?", status))
    return out


def generate_vqa(
    task_ids: Iterable[str],
    seeds: Iterable[int],
    levels: Iterable[str] = ("easy", "hard"),
    config: EnvConfig | None = None,
    per_scene: int = 2,
) -> list[VQASample]:
    """
    Генерация выборки VQA по начальным сценам заданных задач и зёрен.

    Выбор вопросов детерминирован зерном сцены.
    """
    config = config or EnvConfig()
    samples = []
    for task_id in task_ids:
        for level in levels:
            for seed in seeds:
                state, obs = reset(make_task(task_id, level), int(seed), config)
                questions = scene_questions(state)
                rng = np.random.default_rng([int(seed), len(questions)])
                picks = rng.choice(len(questions), size=min(per_scene, len(questions)), replace=False)
                for k, index in enumerate(sorted(int(i) for i in picks)):
                    question, answer = questions[index]
                    samples.append(
                        VQASample(f"vqa-{task_id}-{level}-{int(seed):05d}-{k}", obs.image, question, answer)
                    )
    return samples


def write_vqa(path: Path | str, samples: Iterable[VQASample], stamp: dict[str, str]) -> Path:
    return write_jsonl(path, ({**sample.to_dict(), **stamp} for sample in samples))


def read_vqa(path: Path | str) -> list[VQASample]:
    return [VQASample.from_dict(row) for row in read_jsonl(path)]
