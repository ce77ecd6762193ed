"""
Трёхстадийная аннотация EM-CoT и извлечение визуальных подцелей.

Стадии: повествование о задаче, извлечение плана подзадач, выравнивание подзадач
по кадрам с рассуждением от первого лица. Ответы бэкенда разбираются и
проверяются одинаково для шаблонного и внешнего бэкендов.
"""

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from loguru import logger

from emcot_vla.config.configurations import AnnotatorConfig, RunConfig, Thresholds
from emcot_vla.envsim.collect import Trajectory
from emcot_vla.envsim.tasks import get_definition
from emcot_vla.processing.backends import (
    AnnotationContext,
    AnnotatorBackend,
    TemplateBackend,
    make_backend,
)
from emcot_vla.processing.primitives import PrimitiveTable, extract_primitives
from emcot_vla.processing.prompts import (
    prompt_hash,
    render_alignment_prompt,
    render_narrative_prompt,
    render_subtask_prompt,
)
from emcot_vla.utils.errors import ConfigurationError, EmcotError, InputError, ParseError, ValidationError
from emcot_vla.utils.io import read_jsonl, write_jsonl

MAX_SUBTASKS = 8

sentence_split_pattern = re.compile(r"(?<=[.!?])\s+")
blank_line_pattern = re.compile(r"\n\s*\n")


@dataclass
class AlignmentEntry:
    subtask: str
    start: int
    end: int
    reasoning: str

    def to_dict(self) -> dict[str, Any]:
        return {"subtask": self.subtask, "frame": [self.start, self.end], "reasoning": self.reasoning}


@dataclass
class EMCoTRecord:
    """
    Траектория, дополненная повествованием, планом, выравниванием и подцелями.

    Parameters
    ----------
    trajectory_id : str
        Идентификатор исходной траектории.
    instruction : str
        Инструкция задачи.
    narrative : str
        Повествование (один абзац).
    plan : list[str]
        План подзадач.
    alignment : list[AlignmentEntry]
        Диапазоны подзадач с рассуждениями.
    frames : list[dict]
        Поля по кадрам: ``t``, ``entry`` (номер вхождения подзадачи), ``subtask``,
        ``reasoning``, ``goal`` (индекс кадра-подцели), ``left``/``right``
        (фразы примитивов рук).
    provenance : dict
        Бэкенд, хеши запросов, откаты на шаблоны и предупреждения.
    """

    trajectory_id: str
    instruction: str
    narrative: str
    plan: list[str]
    alignment: list[AlignmentEntry]
    frames: list[dict[str, Any]]
    provenance: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def goals(self) -> list[int]:
        return [frame["goal"] for frame in self.frames]

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["alignment"] = [entry.to_dict() for entry in self.alignment]
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EMCoTRecord":
        alignment = [
            AlignmentEntry(e["subtask"], int(e["frame"][0]), int(e["frame"][1]), e["reasoning"])
            for e in data["alignment"]
        ]
        return cls(
            trajectory_id=data["trajectory_id"],
            instruction=data["instruction"],
            narrative=data["narrative"],
            plan=list(data["plan"]),
            alignment=alignment,
            frames=list(data["frames"]),
            provenance=dict(data.get("provenance", {})),
        )


def validate_narrative(text: str) -> str:
    """
    Проверка повествования: непустой единственный абзац. Переводы строк внутри
    абзаца заменяются пробелами.
    """
    if not isinstance(text, str) or not text.strip():
        raise ValidationError("Пустое повествование")
    if blank_line_pattern.search(text.strip()):
        raise ValidationError("Повествование должно состоять из одного абзаца")
    return " ".join(text.split())


def parse_plan(raw: str) -> list[str]:
    """
    Разбор ответа второй стадии: строго JSON-список строк.
    """
    try:
        plan = json.loads(raw)
    except (TypeError, json.JSONDecodeError) as exc:
        raise ParseError("Ответ не является JSON", raw) from exc
    if not isinstance(plan, list) or not all(isinstance(item, str) for item in plan):
        raise ParseError("Ожидался JSON-список строк", raw)
    return validate_plan(plan)


def validate_plan(plan: list[str]) -> list[str]:
    plan = [item.strip() for item in plan]
    issues = []
    if not 1 <= len(plan) <= MAX_SUBTASKS:
        issues.append(f"число подзадач {len(plan)} вне диапазона [1, {MAX_SUBTASKS}]")
    issues += [f"подзадача {i} пуста" for i, item in enumerate(plan) if not item]
    issues += [
        f"подзадачи {i - 1} и {i} совпадают" for i in range(1, len(plan)) if plan[i] == plan[i - 1]
    ]
    if issues:
        raise ValidationError("Некорректный план подзадач", issues)
    return plan


def parse_alignment(raw: str) -> list[AlignmentEntry]:
    """
    Разбор ответа третьей стадии: JSON-список объектов subtask/frame/reasoning.
    """
    try:
        data = json.loads(raw)
    except (TypeError, json.JSONDecodeError) as exc:
        raise ParseError("Ответ не является JSON", raw) from exc
    if not isinstance(data, list):
        raise ParseError("Ожидался JSON-список объектов", raw)
    entries = []
    for i, item in enumerate(data):
        try:
            start, end = item["frame"]
            entries.append(AlignmentEntry(str(item["subtask"]), int(start), int(end), str(item["reasoning"])))
        except (TypeError, KeyError, ValueError) as exc:
            raise ParseError(f"Запись {i} не содержит subtask/frame/reasoning", raw) from exc
    return entries


def validate_alignment(
    entries: list[AlignmentEntry], plan: list[str], length: int, active: list[bool]
) -> list[AlignmentEntry]:
    """
    Проверка выравнивания.

    Записи идут по времени без пересечений и пропусков и покрывают [0, T−1];
    подзадачи входят в план; каждый диапазон содержит хотя бы один кадр
    с движением, кроме последнего диапазона, целиком состоящего из покоя.

    Raises
    ------
    ValidationError
        Со списком всех нарушений.
    """
    issues = []
    if not entries:
        raise ValidationError("Пустое выравнивание")
    expected = 0
    for i, entry in enumerate(entries):
        if entry.subtask not in plan:
            issues.append(f"запись {i}: подзадача '{entry.subtask}' отсутствует в плане")
        if entry.start > entry.end:
            issues.append(f"запись {i}: начало {entry.start} позже конца {entry.end}")
        if entry.start < 0 or entry.end > length - 1:
            issues.append(f"запись {i}: диапазон [{entry.start}, {entry.end}] вне [0, {length - 1}]")
        if entry.start < expected:
            issues.append(f"запись {i}: пересечение на кадре {entry.start}")
        elif entry.start > expected:
            issues.append(f"запись {i}: пропущены кадры {expected}..{entry.start - 1}")
        expected = max(expected, entry.end + 1)

        last = i == len(entries) - 1
        window = active[max(entry.start, 0) : min(entry.end, length - 1) + 1]
        if window and not any(window) and not last:
            issues.append(f"запись {i}: диапазон [{entry.start}, {entry.end}] целиком из покоя")
    if expected < length:
        issues.append(f"кадры {expected}..{length - 1} не покрыты")
    if issues:
        raise ValidationError("Некорректное выравнивание подзадач", issues)
    return entries


def truncate_reasoning(text: str, max_words: int) -> tuple[str, bool]:
    """
    Усечение рассуждения по границе предложения до ``max_words`` слов.

    Returns
    -------
    tuple[str, bool]
        Текст и признак усечения.
    """
    if len(text.split()) <= max_words:
        return text, False
    kept, count = [], 0
    for sentence in sentence_split_pattern.split(text.strip()):
        words = len(sentence.split())
        if count + words > max_words:
            break
        kept.append(sentence)
        count += words
    if not kept:
        kept = [" ".join(text.split()[:max_words])]
    return " ".join(kept), True


def goal_frames(
    frame_subtasks: list[str], shift: int = 0, keys: str = "occurrence"
) -> tuple[list[int], list[str]]:
    """
    Кадры-подцели по последовательности подзадач s_0..s_{T−1}.

    При каждой смене подзадачи на кадре t запоминается M[s_{t−1}] = t + shift,
    в конце M[s_{T−1}] = T − 1, затем G_t = M[s_t].

    Parameters
    ----------
    frame_subtasks : list[str]
        Подзадача каждого кадра.
    shift : int
        0 (первый кадр следующей подзадачи) или -1 (последний кадр текущей).
    keys : str
        ``occurrence`` — ключ словаря M есть вхождение подзадачи, и повторное
        вхождение получает свою подцель; ``string`` — ключ есть строка подзадачи,
        и повторное вхождение перезаписывает подцель всех вхождений.

    Returns
    -------
    tuple[list[int], list[str]]
        Индексы G и предупреждения о повторных вхождениях.
    """
    if not frame_subtasks:
        raise InputError("Пустая последовательность подзадач")
    if keys not in ("occurrence", "string"):
        raise ConfigurationError(f"Неизвестный способ ключей подцелей: {keys}")
    occurrence = [0]
    for t in range(1, len(frame_subtasks)):
        occurrence.append(occurrence[-1] + int(frame_subtasks[t] != frame_subtasks[t - 1]))
    key = list(zip(frame_subtasks, occurrence)) if keys == "occurrence" else list(frame_subtasks)

    mapping: dict = {}
    warnings: list[str] = []
    seen: dict[str, int] = {}
    for t, subtask in enumerate(frame_subtasks):
        if subtask in seen and seen[subtask] != occurrence[t]:
            warnings.append(f"подзадача '{subtask}' встречается повторно (ключи подцелей: {keys})")
        seen[subtask] = occurrence[t]

    for t in range(1, len(frame_subtasks)):
        if frame_subtasks[t] != frame_subtasks[t - 1]:
            mapping[key[t - 1]] = t + shift
    mapping[key[-1]] = len(frame_subtasks) - 1
    return [mapping[k] for k in key], warnings


def extract_subgoals(
    alignment: list[AlignmentEntry], length: int, shift: int = 0, keys: str = "occurrence"
) -> list[int]:
    frame_subtasks = [""] * length
    for entry in alignment:
        for t in range(entry.start, entry.end + 1):
            frame_subtasks[t] = entry.subtask
    return goal_frames(frame_subtasks, shift, keys)[0]


def _ask(
    backend: AnnotatorBackend,
    stage: str,
    prompt: str,
    context: AnnotationContext,
    parse: Callable[[str], Any],
    retries: int,
) -> Any:
    attempts = 1 if isinstance(backend, TemplateBackend) else retries + 1
    for attempt in range(attempts):
        try:
            return parse(backend.complete(stage, prompt, context))
        except EmcotError as exc:
            if attempt == attempts - 1:
                raise
            logger.debug("Стадия {}: попытка {} не удалась: {}", stage, attempt + 1, exc)


def generate_narrative(
    instruction: str,
    labels: PrimitiveTable,
    backend: AnnotatorBackend,
    context: AnnotationContext,
    retries: int = 2,
) -> tuple[str, str]:
    """
    Первая стадия: повествование о задаче.

    Returns
    -------
    tuple[str, str]
        Повествование и текст запроса.
    """
    if labels.df.empty:
        raise InputError("Пустая таблица примитивов")
    prompt = render_narrative_prompt(instruction, labels.frame_sentences())
    return _ask(backend, "narrative", prompt, context, validate_narrative, retries), prompt


def extract_subtasks(
    narrative: str, backend: AnnotatorBackend, context: AnnotationContext, retries: int = 2
) -> tuple[list[str], str]:
    """
    Вторая стадия: план подзадач.
    """
    prompt = render_subtask_prompt(validate_narrative(narrative))
    return _ask(backend, "subtasks", prompt, context, parse_plan, retries), prompt


def align_subtasks(
    instruction: str,
    plan: list[str],
    labels: PrimitiveTable,
    backend: AnnotatorBackend,
    context: AnnotationContext,
    retries: int = 2,
) -> tuple[list[AlignmentEntry], str]:
    """
    Третья стадия: выравнивание подзадач по кадрам с проверкой покрытия
    и физической согласованности.
    """
    if not plan:
        raise InputError("Пустой план подзадач")
    sentences = labels.frame_sentences()
    active = labels.active_frames()
    prompt = render_alignment_prompt(instruction, plan, sentences)

    def parse(raw: str) -> list[AlignmentEntry]:
        return validate_alignment(parse_alignment(raw), plan, len(sentences), active)

    return _ask(backend, "alignment", prompt, context, parse, retries), prompt


def build_emcot_record(
    trajectory_id: str,
    instruction: str,
    narrative: str,
    plan: list[str],
    alignment: list[AlignmentEntry],
    goals: list[int],
    labels: PrimitiveTable,
    provenance: dict[str, Any] | None = None,
) -> EMCoTRecord:
    """
    Сборка записи EM-CoT с полями по кадрам.
    """
    sentences = labels.frame_sentences()
    if len(goals) != len(sentences):
        raise ValidationError("Число подцелей не совпадает с числом кадров")
    frames = []
    for index, entry in enumerate(alignment):
        for t in range(entry.start, entry.end + 1):
            frames.append(
                {
                    "t": t,
                    "entry": index,
                    "subtask": entry.subtask,
                    "reasoning": entry.reasoning,
                    "goal": int(goals[t]),
                    "left": sentences[t]["left"],
                    "right": sentences[t]["right"],
                }
            )
    return EMCoTRecord(
        trajectory_id=trajectory_id,
        instruction=instruction,
        narrative=narrative,
        plan=list(plan),
        alignment=list(alignment),
        frames=frames,
        provenance=dict(provenance or {}),
    )


def _context(traj: Trajectory, labels: PrimitiveTable) -> AnnotationContext:
    definition = get_definition(traj.task.task_id)
    return AnnotationContext(
        instruction=traj.task.instruction,
        plan=list(traj.plan),
        ranges=traj.subtask_ranges(),
        labels=labels,
        objects=[f"{tpl.color} {tpl.shape}" for tpl in definition.objects],
    )


def annotate_trajectory(
    traj: Trajectory,
    thresholds: Thresholds | None = None,
    config: AnnotatorConfig | None = None,
    backend: AnnotatorBackend | None = None,
) -> EMCoTRecord:
    """
    Полный цикл аннотации одной траектории.

    Сбой внешнего бэкенда на стадии повествования заменяется шаблонным
    повествованием; сбой на стадиях плана или выравнивания заменяет план
    и выравнивание шаблонными. Каждая замена отмечается в ``provenance``.

    Parameters
    ----------
    traj : Trajectory
        Экспертная траектория с границами подзадач.
    thresholds : Thresholds
        Пороги извлечения примитивов.
    config : AnnotatorConfig
        Параметры аннотатора.
    backend : AnnotatorBackend
        Бэкенд; по умолчанию создаётся по ``config.backend``.

    Returns
    -------
    EMCoTRecord
        Запись EM-CoT.
    """
    config = config or AnnotatorConfig()
    backend = backend or make_backend(config)
    template = TemplateBackend()
    labels = extract_primitives(traj.proprio, thresholds or Thresholds(), traj.trajectory_id)
    context = _context(traj, labels)
    instruction = traj.task.instruction
    provenance: dict[str, Any] = {
        "backend": backend.name,
        "model": config.model_name if backend.name == "external" else "template",
        "prompt_hashes": {},
        "fallbacks": [],
        "warnings": [],
    }

    try:
        narrative, prompt = generate_narrative(instruction, labels, backend, context, config.max_retries)
    except EmcotError as exc:
        logger.warning("{}: повествование заменено шаблоном ({})", traj.trajectory_id, exc)
        provenance["fallbacks"].append("narrative")
        narrative, prompt = generate_narrative(instruction, labels, template, context)
    provenance["prompt_hashes"]["narrative"] = prompt_hash(prompt)

    try:
        plan, prompt = extract_subtasks(narrative, backend, context, config.max_retries)
        provenance["prompt_hashes"]["subtasks"] = prompt_hash(prompt)
        alignment, prompt = align_subtasks(instruction, plan, labels, backend, context, config.max_retries)
        provenance["prompt_hashes"]["alignment"] = prompt_hash(prompt)
    except EmcotError as exc:
        logger.warning("{}: план и выравнивание заменены шаблоном ({})", traj.trajectory_id, exc)
        provenance["fallbacks"] += ["subtasks", "alignment"]
        plan, prompt = extract_subtasks(narrative, template, context)
        provenance["prompt_hashes"]["subtasks"] = prompt_hash(prompt)
        alignment, prompt = align_subtasks(instruction, plan, labels, template, context)
        provenance["prompt_hashes"]["alignment"] = prompt_hash(prompt)

    for entry in alignment:
        entry.reasoning, truncated = truncate_reasoning(entry.reasoning, config.max_reasoning_words)
        if truncated:
            message = f"рассуждение '{entry.subtask}' усечено до {config.max_reasoning_words} слов"
            logger.warning("{}: {}", traj.trajectory_id, message)
            provenance["warnings"].append(message)

    frame_subtasks = [entry.subtask for entry in alignment for _ in range(entry.start, entry.end + 1)]
    goals, warnings = goal_frames(frame_subtasks, config.subgoal_shift, config.subgoal_keys)
    provenance["warnings"] += warnings

    return build_emcot_record(
        traj.trajectory_id, instruction, narrative, plan, alignment, goals, labels, provenance
    )


def annotate_dataset(
    trajectories: Iterable[Trajectory], config: RunConfig, workers: int = 1
) -> list[EMCoTRecord]:
    """
    Аннотация набора траекторий пулом потоков с сохранением порядка.
    """
    trajectories = list(trajectories)
    backend = make_backend(config.annotator)
    max_workers = max(1, min(workers, config.annotator.max_in_flight))

    def job(traj: Trajectory) -> EMCoTRecord:
        return annotate_trajectory(traj, config.thresholds, config.annotator, backend)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        records = list(pool.map(job, trajectories))
    n_fallbacks = sum(1 for record in records if record.provenance["fallbacks"])
    logger.info("Аннотировано траекторий: {}, с откатом на шаблон: {}", len(records), n_fallbacks)
    return records


def write_records(path: Path | str, records: Iterable[EMCoTRecord], stamp: dict[str, str]) -> Path:
    return write_jsonl(path, ({**record.to_dict(), **stamp} for record in records))


def read_records(path: Path | str) -> list[EMCoTRecord]:
    return [EMCoTRecord.from_dict(row) for row in read_jsonl(path)]
