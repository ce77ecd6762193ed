"""
Бэкенды аннотатора: детерминированные шаблоны и клиент внешней текстовой модели.

Оба бэкенда получают готовый текст запроса и возвращают текстовый ответ,
дальнейший разбор и проверка общие.
"""

import json
import threading
from dataclasses import dataclass, field
from typing import ClassVar, Protocol

import requests
from loguru import logger

from emcot_vla.config.configurations import AnnotatorConfig
from emcot_vla.processing.primitives import PrimitiveTable, summarize_primitives
from emcot_vla.utils.errors import AnnotatorTimeout, ConfigurationError, ParseError

STAGES = ("narrative", "subtasks", "alignment")


@dataclass
class AnnotationContext:
    """
    Сведения о траектории, доступные шаблонному бэкенду.

    Parameters
    ----------
    instruction : str
        Инструкция задачи.
    plan : list[str]
        План подзадач эксперта.
    ranges : list[tuple[str, int, int]]
        Диапазоны подзадач эксперта (подзадача, начало, конец).
    labels : PrimitiveTable
        Таблица примитивов.
    objects : list[str]
        Названия объектов задачи, например ``red block``.
    """

    instruction: str
    plan: list[str]
    ranges: list[tuple[str, int, int]]
    labels: PrimitiveTable
    objects: list[str] = field(default_factory=list)


class AnnotatorBackend(Protocol):
    name: str

    def complete(self, stage: str, prompt: str, context: AnnotationContext) -> str: ...


def _lower_first(text: str) -> str:
    return text[:1].lower() + text[1:]


def _chain(items: list[str]) -> str:
    if len(items) == 1:
        return items[0]
    if len(items) == 2:
        return f"{items[0]}, then {items[1]}"
    return ", then ".join(items[:-1]) + f", and finally {items[-1]}"


def _plural(count: int, word: str) -> str:
    return f"{count} {word}" + ("" if count == 1 else "s")


@dataclass
class TemplateBackend:
    """
    Детерминированный бэкенд: собирает ответы по границам подзадач эксперта
    и сводке примитивов. Текст запроса не используется.
    """

    name: ClassVar[str] = "template"

    def complete(self, stage: str, prompt: str, context: AnnotationContext) -> str:
        match stage:
            case "narrative":
                return self.narrative(context)
            case "subtasks":
                return json.dumps(context.plan)
            case "alignment":
                return json.dumps(self.alignment(context))
        raise ConfigurationError(f"Неизвестная стадия аннотации: {stage}")

    @staticmethod
    def _arm_summary(summary, arm: str) -> str:
        runs = summary.loc[(summary["arm"] == arm) & (summary["kind"] != "idle"), "kind"]
        counts = runs.value_counts()
        parts = [
            _plural(int(counts[kind]), word)
            for kind, word in (("move", "move"), ("grasp", "grasp"), ("release", "release"))
            if kind in counts
        ]
        if not parts:
            return "stays still"
        if len(parts) > 1:
            return "performs " + ", ".join(parts[:-1]) + f" and {parts[-1]}"
        return f"performs {parts[0]}"

    def narrative(self, context: AnnotationContext) -> str:
        summary = summarize_primitives(context.labels)
        steps = _chain([_lower_first(subtask) for subtask in context.plan])
        return (
            f"I {steps}. "
            f"The left arm {self._arm_summary(summary, 'left')}, "
            f"while the right arm {self._arm_summary(summary, 'right')}."
        )

    @staticmethod
    def _movement(context: AnnotationContext, start: int, end: int) -> str:
        df = context.labels.df
        window = df[(df["frame"] >= start) & (df["frame"] <= end) & (df["kind"] != "idle")]
        phrases: list[str] = []
        for _, row in window.iterrows():
            phrase = f"my {row['arm']} arm will {row['sentence']}"
            if phrase not in phrases:
                phrases.append(phrase)
            if len(phrases) == 2:
                break
        if not phrases:
            return "I keep both arms still"
        return " and then ".join(phrases)

    def alignment(self, context: AnnotationContext) -> list[dict]:
        scene = " and the ".join(context.objects) if context.objects else "workspace"
        entries = []
        for subtask, start, end in context.ranges:
            movement = self._movement(context, start, end)
            reasoning = (
                f"I see the {scene}. "
                f"To {_lower_first(context.instruction)}, I need to {_lower_first(subtask)} now. "
                f"So {movement}."
            )
            entries.append({"subtask": subtask, "frame": [start, end], "reasoning": reasoning})
        return entries


@dataclass
class ExternalBackend:
    """
    Клиент внешней модели с интерфейсом chat completions: текст на входе, текст на выходе.

    Число одновременных запросов ограничено ``max_in_flight``.
    """

    config: AnnotatorConfig
    session: requests.Session = field(default_factory=requests.Session)
    name: ClassVar[str] = "external"

    def __post_init__(self):
        if not self.config.endpoint:
            raise ConfigurationError(
                "Для внешнего аннотатора нужен endpoint (annotator.endpoint или EMCOT_ANNOTATOR_ENDPOINT)"
            )
        self._slots = threading.BoundedSemaphore(max(1, self.config.max_in_flight))

    def complete(self, stage: str, prompt: str, context: AnnotationContext | None = None) -> str:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        payload = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        with self._slots:
            try:
                response = self.session.post(
                    self.config.endpoint, json=payload, headers=headers, timeout=self.config.timeout
                )
                response.raise_for_status()
            except requests.Timeout as exc:
                raise AnnotatorTimeout(f"Стадия {stage}: превышено время ожидания ответа") from exc
            except requests.RequestException as exc:
                raise AnnotatorTimeout(f"Стадия {stage}: ошибка запроса {exc}") from exc

        try:
            return response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            logger.debug("Неожиданный ответ внешнего аннотатора: {}", response.text[:200])
            raise ParseError(f"Стадия {stage}: ответ не в формате chat completions", response.text) from exc


def make_backend(config: AnnotatorConfig) -> AnnotatorBackend:
    if config.backend == "external":
        return ExternalBackend(config)
    return TemplateBackend()
