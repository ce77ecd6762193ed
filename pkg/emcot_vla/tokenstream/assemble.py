"""
Сборка типизированных последовательностей для образцов EM-CoT, VQA, VG и AP.

Раскладка EM-CoT:
кадры контекста (vis_und, затем vis_clean) -> инструкция с проприоцепцией ->
``<think_start>`` рассуждение ``<think_end>`` -> ``<vision_start>`` шум подцели
``<vision_end>`` -> чистые латенты подцели -> ``<action_start>`` шум действий
``<action_end>``.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from emcot_vla.config.configurations import MODES, EnvConfig, ModelConfig, TokenConfig
from emcot_vla.envsim.collect import Trajectory
from emcot_vla.envsim.env import normalize_action
from emcot_vla.processing.annotator import EMCoTRecord
from emcot_vla.processing.vqa import VQASample
from emcot_vla.tokenstream.records import Sample, TokenRecord
from emcot_vla.tokenstream.vocab import Vocabulary
from emcot_vla.utils.errors import InputError

VISION_GROUP = 0
ACTION_GROUP = 1

LatentFn = Callable[[np.ndarray], np.ndarray]


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """
    Нарезка RGB-кадра на патчи семантической ветви.

    Returns
    -------
    np.ndarray
        Массив (P, patch_size * patch_size * 3) со значениями в [-1, 1].
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"Ожидался RGB-кадр (H, W, 3), получено {image.shape}")
    h, w, _ = image.shape
    if h % patch_size or w % patch_size:
        raise InputError(f"Размер кадра {h}x{w} не делится на патч {patch_size}")
    grid = image.reshape(h // patch_size, patch_size, w // patch_size, patch_size, 3)
    patches = grid.transpose(0, 2, 1, 3, 4).reshape(-1, patch_size * patch_size * 3)
    return patches.astype(np.float32) / 127.5 - 1.0


def format_proprio(proprio: np.ndarray) -> str:
    return " ".join(f"{value:.1f}" for value in np.asarray(proprio, dtype=np.float64))


def think_text(plan: list[str], subtask: str, reasoning: str, left: str, right: str) -> str:
    """
    Текст внутри ``<think_start>``/``<think_end>``: план, текущая подзадача,
    рассуждение и фразы примитивов обеих рук.
    """
    return (
        f"<plan_start>{'; '.join(plan)}<plan_end>"
        f"<subtask_start>{subtask}<subtask_end>"
        f"{reasoning}"
        f"<move_start>left: {left}; right: {right}<move_end>"
    )


def context_indices(t: int, c: int) -> list[int]:
    """
    Индексы кадров контекста t-c+1..t; кадры до начала траектории
    заменяются кадром 0.
    """
    return [max(0, t - c + 1 + i) for i in range(c)]


def action_chunk(actions: np.ndarray, t: int, k: int) -> tuple[np.ndarray, int]:
    """
    Чанк a_{t:t+K}; за концом траектории дополняется повтором последнего действия.

    Returns
    -------
    tuple[np.ndarray, int]
        Чанк (K, 8) и число добавленных строк.
    """
    actions = np.asarray(actions)
    chunk = actions[t : t + k]
    padded = k - len(chunk)
    if padded > 0:
        chunk = np.concatenate([chunk, np.repeat(actions[-1:], padded, axis=0)])
    return chunk, padded


@dataclass
class VGSample:
    """
    Предсказание будущего кадра: контекст I_{t-k+1..t} и цель I_{t+h}.
    """

    sample_id: str
    instruction: str
    context: list[np.ndarray]
    target: np.ndarray
    proprio: np.ndarray | None = None


@dataclass
class APSample:
    """
    Предсказание действий без рассуждения и подцели.

    ``actions`` хранятся в исходных единицах среды формы (K, 8).
    """

    sample_id: str
    instruction: str
    context: list[np.ndarray]
    proprio: np.ndarray
    actions: np.ndarray
    padded: int = 0


@dataclass
class SequenceBuilder:
    """
    Сборщик последовательностей.

    Parameters
    ----------
    vocab : Vocabulary
        Словарь.
    latent_fn : Callable[[np.ndarray], np.ndarray]
        Кодер кадра в латенты (L, C) генеративной ветви.
    model_config, token_config, env_config
        Размерности модели, параметры последовательностей и среды
        (для нормализации действий).
    """

    vocab: Vocabulary
    latent_fn: LatentFn
    model_config: ModelConfig = field(default_factory=ModelConfig)
    token_config: TokenConfig = field(default_factory=TokenConfig)
    env_config: EnvConfig = field(default_factory=EnvConfig)
    cache_size: int = 4096
    _cache: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, init=False, repr=False)

    def encode_frame(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Патчи и латенты кадра; повторно встречающиеся кадры берутся из кэша.
        """
        image = np.ascontiguousarray(image)
        key = hashlib.sha1(image.tobytes()).hexdigest()
        if key not in self._cache:
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            patches = patchify(image, self.model_config.patch_size)
            latents = np.asarray(self.latent_fn(image), dtype=np.float32)
            self._cache[key] = (patches, latents)
        return self._cache[key]

    def clear_cache(self) -> None:
        self._cache.clear()

    # элементы раскладки

    def text_records(self, text: str, loss: bool = False) -> list[TokenRecord]:
        ids = self.vocab.encode(text)
        return [TokenRecord("text", payload=i, loss=loss, target=i if loss else None) for i in ids]

    def special(self, token: str, loss: bool = False) -> TokenRecord:
        token_id = self.vocab.id(token)
        return TokenRecord("text", payload=token_id, loss=loss, target=token_id if loss else None)

    def frame_records(self, image: np.ndarray, frame: int, understanding: bool = True) -> list[TokenRecord]:
        """
        Двойной путь кадра: токены понимания (патчи), затем чистые латенты.
        """
        patches, latents = self.encode_frame(image)
        out = []
        if understanding:
            out.extend(TokenRecord("vis_und", payload=p, frame=frame) for p in patches)
        out.extend(TokenRecord("vis_clean", payload=z, frame=frame) for z in latents)
        return out

    def context_records(
        self, images: list[np.ndarray], instruction: str, proprio: np.ndarray | None = None
    ) -> list[TokenRecord]:
        """
        Префикс: кадры контекста и строка инструкции (с проприоцепцией, если задана).
        """
        if not images:
            raise InputError("Нет кадров контекста")
        records = []
        for frame, image in enumerate(images):
            records.extend(self.frame_records(image, frame))
        line = instruction if proprio is None else f"{instruction} state: {format_proprio(proprio)}"
        records.extend(self.text_records(line))
        return records

    def vision_noise_records(self, target_frame: int, targets: np.ndarray | None = None) -> list[TokenRecord]:
        n = self.model_config.n_latents
        if targets is not None and len(targets) != n:
            raise InputError(f"Ожидалось {n} латентов цели, получено {len(targets)}")
        return [
            TokenRecord(
                "vis_noise",
                group=VISION_GROUP,
                target_frame=target_frame,
                loss=targets is not None,
                target=None if targets is None else targets[i],
            )
            for i in range(n)
        ]

    def action_noise_records(self, targets: np.ndarray | None = None) -> list[TokenRecord]:
        k = self.model_config.chunk
        if targets is not None and len(targets) != k:
            raise InputError(f"Ожидалось {k} действий, получено {len(targets)}")
        return [
            TokenRecord(
                "act_noise",
                group=ACTION_GROUP,
                loss=targets is not None,
                target=None if targets is None else targets[i],
            )
            for i in range(k)
        ]

    def vision_span(self, target_frame: int, targets: np.ndarray | None = None) -> list[TokenRecord]:
        return [
            self.special("<vision_start>"),
            *self.vision_noise_records(target_frame, targets),
            self.special("<vision_end>"),
        ]

    def action_span(self, targets: np.ndarray | None = None) -> list[TokenRecord]:
        return [
            self.special("<action_start>"),
            *self.action_noise_records(targets),
            self.special("<action_end>"),
        ]

    def think_records(self, text: str, next_token: str | None, loss: bool = True) -> list[TokenRecord]:
        """
        Рассуждение с потерями на тексте, ``<think_end>`` и следующем за ним токене.
        """
        records = [self.special("<think_start>")]
        records.extend(self.text_records(text, loss=loss))
        records.append(self.special("<think_end>", loss=loss))
        if next_token is not None:
            records.append(self.special(next_token, loss=loss))
        return records

    # образцы

    def assemble_emcot_sequence(
        self,
        record: EMCoTRecord,
        traj: Trajectory,
        t: int,
        mode: str = "full",
        context: int | None = None,
    ) -> Sample:
        """
        Образец EM-CoT для кадра t траектории.

        Parameters
        ----------
        record : EMCoTRecord
            Аннотация траектории.
        traj : Trajectory
            Траектория с кадрами и действиями.
        t : int
            Текущий кадр.
        mode : str
            ``full``, ``no_text`` (без рассуждения), ``no_vis`` (без подцели),
            ``none`` (только действия).
        context : int | None
            Число кадров контекста c; по умолчанию из конфигурации модели.

        Returns
        -------
        Sample
            Образец; в ``meta["padded"]`` число повторённых действий в чанке.
        """
        if mode not in MODES:
            raise InputError(f"Неизвестный режим: {mode}")
        if not 0 <= t < len(traj):
            raise InputError(f"Кадр {t} вне траектории длины {len(traj)}")
        if len(record) != len(traj):
            raise InputError("Аннотация и траектория имеют разную длину")
        c = context or self.model_config.context_frames
        if c < 1:
            raise InputError("Число кадров контекста должно быть не меньше 1")

        frame = record.frames[t]
        images = [traj.observations[i].image for i in context_indices(t, c)]
        records = self.context_records(images, record.instruction, traj.observations[t].proprio)

        with_text = mode in ("full", "no_vis")
        with_vision = mode in ("full", "no_text")
        if with_text:
            text = think_text(record.plan, frame["subtask"], frame["reasoning"], frame["left"], frame["right"])
            next_token = "<vision_start>" if with_vision else "<action_start>"
            think = self.think_records(text, next_token)
            records.extend(think[:-1])
        if with_vision:
            _, goal_latents = self.encode_frame(traj.observations[frame["goal"]].image)
            span = self.vision_span(target_frame=c, targets=goal_latents)
            if with_text:
                span[0] = think[-1]
            records.extend(span)
            records.extend(self.frame_records(traj.observations[frame["goal"]].image, c, understanding=False))

        chunk, padded = action_chunk(traj.actions, t, self.model_config.chunk)
        span = self.action_span(normalize_action(chunk, self.env_config).astype(np.float32))
        if with_text and not with_vision:
            span[0] = think[-1]
        records.extend(span)
        meta = {"trajectory_id": record.trajectory_id, "t": t, "mode": mode, "padded": padded, "goal": frame["goal"]}
        return Sample(f"{record.trajectory_id}:{t}:{mode}", "emcot", records, meta)

    def assemble_pretrain_sequence(self, sample: VQASample | VGSample | APSample) -> Sample:
        """
        Образец предобучения по его виду.
        """
        match sample:
            case VQASample():
                return self._assemble_vqa(sample)
            case VGSample():
                return self._assemble_vg(sample)
            case APSample():
                return self._assemble_ap(sample)
        raise InputError(f"Неизвестный вид образца: {type(sample).__name__}")

    def _assemble_vqa(self, sample: VQASample) -> Sample:
        if sample.image is None or not sample.question or not sample.answer:
            raise InputError(f"Образец {sample.sample_id}: нет изображения, вопроса или ответа")
        patches, _ = self.encode_frame(sample.image)
        records = [TokenRecord("vis_und", payload=p, frame=0) for p in patches]
        records.extend(self.text_records(f"question: {sample.question} answer:"))
        records.extend(self.text_records(f" {sample.answer}", loss=True))
        records.append(self.special("<eos>", loss=True))
        return Sample(sample.sample_id, "vqa", records, {"answer": sample.answer})

    def _assemble_vg(self, sample: VGSample) -> Sample:
        if not sample.context or sample.target is None:
            raise InputError(f"Образец {sample.sample_id}: нет кадров контекста или целевого кадра")
        records = self.context_records(sample.context, sample.instruction, sample.proprio)
        _, target = self.encode_frame(sample.target)
        records.extend(self.vision_span(target_frame=len(sample.context), targets=target))
        return Sample(sample.sample_id, "vg", records, {})

    def _assemble_ap(self, sample: APSample) -> Sample:
        if not sample.context or sample.actions is None or len(sample.actions) == 0:
            raise InputError(f"Образец {sample.sample_id}: нет кадров контекста или действий")
        records = self.context_records(sample.context, sample.instruction, sample.proprio)
        actions = normalize_action(sample.actions, self.env_config).astype(np.float32)
        records.extend(self.action_span(actions))
        return Sample(sample.sample_id, "ap", records, {"padded": sample.padded})


def vg_sample(traj: Trajectory, t: int, k: int, h: int) -> VGSample:
    """
    Образец VG для кадра t: k кадров контекста и цель I_{min(t+h, T-1)}.
    """
    images = [traj.observations[i].image for i in context_indices(t, k)]
    target = traj.observations[min(t + h, len(traj) - 1)].image
    return VGSample(
        f"vg-{traj.trajectory_id}-{t}", traj.task.instruction, images, target, traj.observations[t].proprio
    )


def ap_sample(traj: Trajectory, t: int, c: int, k: int) -> APSample:
    images = [traj.observations[i].image for i in context_indices(t, c)]
    chunk, padded = action_chunk(traj.actions, t, k)
    return APSample(
        f"ap-{traj.trajectory_id}-{t}", traj.task.instruction, images, traj.observations[t].proprio, chunk, padded
    )


def span_order_valid(token_ids: list[int], vocab: Vocabulary, mode: str = "full") -> bool:
    """
    Проверка структурных токенов: каждый требуемый режимом отрезок
    (think, vision, action) ровно один, правильно закрыт и идёт в порядке
    think -> vision -> action; лишних отрезков нет.
    """
    required = {
        "full": ("think", "vision", "action"),
        "no_text": ("vision", "action"),
        "no_vis": ("think", "action"),
        "none": ("action",),
    }[mode]
    markers: list[tuple[str, str]] = []
    for token_id in token_ids:
        token = vocab.tokens[token_id]
        for span in ("think", "vision", "action"):
            if token == f"<{span}_start>":
                markers.append((span, "start"))
            elif token == f"<{span}_end>":
                markers.append((span, "end"))
    expected = [(span, edge) for span in required for edge in ("start", "end")]
    return markers == expected


def sample_summary(sample: Sample) -> dict[str, Any]:
    """
    Число записей каждой роли и число записей с потерями.
    """
    roles = sample.roles()
    summary: dict[str, Any] = {role: roles.count(role) for role in dict.fromkeys(roles)}
    summary["loss"] = sum(record.loss for record in sample.records)
    return summary
