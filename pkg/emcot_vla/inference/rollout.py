"""
Замкнутое исполнение политики: рассуждение -> подцель -> чанк действий.
"""

from dataclasses import dataclass, field
from functools import partial
from typing import Any

import numpy as np
import torch
from loguru import logger

from emcot_vla.config.configurations import EnvConfig, RolloutConfig, RunConfig
from emcot_vla.envsim.env import TabletopEnv, denormalize_action
from emcot_vla.envsim.tasks import TaskSpec
from emcot_vla.envsim.world import Observation
from emcot_vla.model.batch import TensorBatch, collate
from emcot_vla.model.codec import LatentCodec, decode_latents, encode_latents
from emcot_vla.model.flow import sample_flow
from emcot_vla.model.mot import MoTPolicy
from emcot_vla.tokenstream.assemble import SequenceBuilder, span_order_valid
from emcot_vla.tokenstream.mask import ACT_NOISE, VIS_NOISE
from emcot_vla.tokenstream.packing import PackedSequence
from emcot_vla.tokenstream.records import Sample, TokenRecord
from emcot_vla.tokenstream.vocab import SPECIAL_TOKENS, Vocabulary
from emcot_vla.utils.errors import InputError

THINK_STRUCTURE = ("<plan_start>", "<plan_end>", "<subtask_start>", "<subtask_end>", "<move_start>", "<move_end>")


@dataclass
class StepOutput:
    """
    Результат одного шага EM-CoT.

    Parameters
    ----------
    reasoning : str
        Декодированный текст рассуждения (пусто без текстовой части).
    reasoning_ids : list[int]
        Токены рассуждения.
    subgoal : np.ndarray | None
        Изображение подцели (H, W, 3) или ``None`` без визуальной части.
    subgoal_latents : np.ndarray | None
        Латенты подцели (L, C).
    actions : np.ndarray
        Чанк действий (K, 8) в единицах среды.
    forced : bool
        Текстовый бюджет исчерпан, переход к следующему отрезку выполнен принудительно.
    token_ids : list[int]
        Все текстовые токены последовательности (для проверки порядка отрезков).
    """

    reasoning: str
    reasoning_ids: list[int]
    subgoal: np.ndarray | None
    subgoal_latents: np.ndarray | None
    actions: np.ndarray
    forced: bool = False
    token_ids: list[int] = field(default_factory=list)


def history_frames(history: list[Observation], c: int) -> list[np.ndarray]:
    """
    Последние c кадров истории; недостающие слева заменяются первым кадром.
    """
    if not history:
        raise InputError("История наблюдений пуста")
    images = [obs.image for obs in history[-c:]]
    return [history[0].image] * (c - len(images)) + images


class EMCoTPolicy:
    """
    Обёртка модели для исполнения в среде.

    Parameters
    ----------
    model : MoTPolicy
        Обученная модель.
    codec : LatentCodec
        Замороженный кодек.
    config : RunConfig
        Конфигурация; используются секции ``model``, ``tokens``, ``env`` и ``rollout``.
    seed : int
        Зерно шумов потока и выборки текста.
    """

    def __init__(self, model: MoTPolicy, codec: LatentCodec, config: RunConfig, seed: int = 0):
        self.model = model.eval()
        self.codec = codec
        self.config = config
        self.vocab = Vocabulary()
        self.builder = SequenceBuilder(
            self.vocab,
            partial(encode_latents, codec),
            config.model,
            config.tokens,
            config.env,
        )
        self.generator = torch.Generator().manual_seed(seed)

    def reseed(self, seed: int) -> None:
        self.generator.manual_seed(seed)

    def _batch(self, records: list[TokenRecord]) -> TensorBatch:
        sample = Sample("rollout", "emcot", records)
        pack = PackedSequence([sample], self.config.tokens.max_len, self.config.tokens.isolate_noise_groups)
        return collate([pack], self.config.model)

    def _banned(self, stops: set[int], generated: int, rollout: RolloutConfig) -> list[int]:
        allowed = {self.vocab.id(token) for token in THINK_STRUCTURE} | stops
        banned = [i for i in range(len(SPECIAL_TOKENS)) if i not in allowed]
        if generated < rollout.min_text_tokens:
            banned.extend(stops)
        return banned

    @torch.no_grad()
    def decode_reasoning(
        self, records: list[TokenRecord], next_start: str, rollout: RolloutConfig
    ) -> tuple[list[int], bool]:
        """
        Авторегрессионное декодирование рассуждения после ``<think_start>``.

        Останов по ``<think_end>`` или ``next_start``; до ``min_text_tokens``
        токенов останов запрещён. Исчерпание ``max_text_tokens`` означает
        принудительный переход.

        Returns
        -------
        tuple[list[int], bool]
            Токены рассуждения и признак принудительного перехода.
        """
        stops = {self.vocab.id("<think_end>"), self.vocab.id(next_start)}
        records = list(records)
        generated: list[int] = []
        for _ in range(rollout.max_text_tokens):
            batch = self._batch(records)
            hidden = self.model(batch)
            logits = self.model.text_logits(hidden[0, len(records) - 1]).clone()
            logits[self._banned(stops, len(generated), rollout)] = float("-inf")
            if rollout.temperature > 0:
                probs = torch.softmax(logits / rollout.temperature, dim=-1)
                token = int(torch.multinomial(probs, 1, generator=self.generator))
            else:
                token = int(torch.argmax(logits))
            if token in stops:
                return generated, False
            generated.append(token)
            records.append(TokenRecord("text", payload=token))
        return generated, True

    def _sample_group(self, records: list[TokenRecord], kind: str) -> np.ndarray:
        batch = self._batch(records)
        values = sample_flow(self.model, batch, kind, self.config.rollout.flow_steps, self.generator)
        code = VIS_NOISE if kind == "vis" else ACT_NOISE
        return values[0, batch.role[0] == code].cpu().numpy()

    def emcot_step(
        self,
        instruction: str,
        history: list[Observation],
        mode: str | None = None,
        reuse: StepOutput | None = None,
    ) -> StepOutput:
        """
        Один шаг EM-CoT: рассуждение, подцель, чанк действий.

        Parameters
        ----------
        instruction : str
            Инструкция задачи.
        history : list[Observation]
            Наблюдения эпизода; используются последние c.
        mode : str | None
            Режим; по умолчанию ``rollout.mode``.
        reuse : StepOutput | None
            Готовые рассуждение и подцель; заново выбираются только действия.
        """
        rollout = self.config.rollout
        mode = mode or rollout.mode
        c = self.config.model.context_frames
        builder = self.builder
        records = builder.context_records(history_frames(history, c), instruction, history[-1].proprio)

        with_text = mode in ("full", "no_vis")
        with_vision = mode in ("full", "no_text")
        next_start = "<vision_start>" if with_vision else "<action_start>"
        reasoning_ids: list[int] = []
        forced = False
        if with_text:
            records.append(builder.special("<think_start>"))
            if reuse is not None:
                reasoning_ids = list(reuse.reasoning_ids)
            else:
                reasoning_ids, forced = self.decode_reasoning(records, next_start, rollout)
                if forced:
                    logger.debug("Бюджет текста {} исчерпан, принудительный переход", rollout.max_text_tokens)
            records.extend(TokenRecord("text", payload=i) for i in reasoning_ids)
            records.append(builder.special("<think_end>"))

        subgoal = latents = None
        if with_vision:
            if reuse is not None and reuse.subgoal_latents is not None:
                latents = reuse.subgoal_latents
                records.extend(builder.vision_span(target_frame=c))
            else:
                records.extend(builder.vision_span(target_frame=c))
                latents = self._sample_group(records, "vis")
            subgoal = decode_latents(self.codec, latents)
            records.extend(TokenRecord("vis_clean", payload=z, frame=c) for z in latents)

        records.extend(builder.action_span())
        normalized = self._sample_group(records, "act")
        actions = denormalize_action(normalized, self.config.env)
        token_ids = [r.payload for r in records if r.role == "text"]
        return StepOutput(
            reasoning=self.vocab.decode(reasoning_ids),
            reasoning_ids=reasoning_ids,
            subgoal=subgoal,
            subgoal_latents=latents,
            actions=actions,
            forced=forced,
            token_ids=token_ids,
        )


@dataclass
class EpisodeRecord:
    """
    Итог эпизода.
    """

    task_id: str
    level: str
    seed: int
    mode: str
    success: bool = False
    steps: int = 0
    chunks: int = 0
    valid: bool = True
    error: str = ""
    forced_transitions: int = 0
    span_violations: int = 0
    reasoning: list[str] = field(default_factory=list)
    subgoals: list[np.ndarray] = field(default_factory=list, repr=False)
    frames: list[np.ndarray] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "level": self.level,
            "seed": self.seed,
            "mode": self.mode,
            "success": self.success,
            "steps": self.steps,
            "chunks": self.chunks,
            "valid": self.valid,
            "error": self.error,
            "forced_transitions": self.forced_transitions,
            "span_violations": self.span_violations,
            "reasoning": list(self.reasoning),
        }


def subgoal_reached(policy: EMCoTPolicy, obs: Observation, target: np.ndarray | None, tolerance: float) -> bool:
    if target is None:
        return True
    current = encode_latents(policy.codec, obs.image)
    return float(np.mean((current - target) ** 2)) <= tolerance


def run_episode(
    policy: EMCoTPolicy,
    task: TaskSpec,
    seed: int,
    env_config: EnvConfig | None = None,
    rollout: RolloutConfig | None = None,
    keep_frames: bool = False,
) -> EpisodeRecord:
    """
    Эпизод в замкнутом контуре.

    Из каждого чанка исполняется min(K, оставшиеся шаги) действий. При
    ``replan_trigger="chunk"`` рассуждение и подцель пересчитываются каждые
    ``replan_every`` чанков, при ``"subgoal"`` после достижения подцели;
    в остальных чанках заново выбираются только действия.
    Ошибка среды делает эпизод недействительным.
    """
    env_config = env_config or policy.config.env
    rollout = rollout or policy.config.rollout
    record = EpisodeRecord(task.task_id, task.level, int(seed), rollout.mode)
    limit = min(rollout.step_limit, env_config.step_limit)
    env = TabletopEnv(env_config)
    policy.reseed(seed)
    try:
        obs = env.reset(task, seed)
        history = [obs]
        cached: StepOutput | None = None
        done = False
        while not done and record.steps < limit:
            match rollout.replan_trigger:
                case "chunk":
                    replan = cached is None or record.chunks % rollout.replan_every == 0
                case _:
                    replan = cached is None or subgoal_reached(
                        policy, history[-1], cached.subgoal_latents, rollout.subgoal_tolerance
                    )
            output = policy.emcot_step(task.instruction, history, rollout.mode, None if replan else cached)
            if replan:
                cached = output
                record.forced_transitions += int(output.forced)
                if output.reasoning:
                    record.reasoning.append(output.reasoning)
                if output.subgoal is not None:
                    record.subgoals.append(output.subgoal)
            if not span_order_valid(output.token_ids, policy.vocab, rollout.mode):
                record.span_violations += 1
            for action in output.actions[: min(len(output.actions), limit - record.steps)]:
                obs, done = env.step(action)
                history.append(obs)
                record.steps += 1
                if keep_frames:
                    record.frames.append(obs.image)
                if done:
                    break
            record.chunks += 1
        record.success = env.success
    except InputError as exc:
        record.valid = False
        record.error = str(exc)
        logger.warning("Эпизод {}-{}-{} недействителен: {}", task.task_id, task.level, seed, exc)
    return record
