"""
Цикл обучения стадий предобучения и дообучения.
"""

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import pandas as pd
import torch
from loguru import logger
from torch.optim.lr_scheduler import LambdaLR
from tqdm import tqdm

from emcot_vla.config.configurations import RunConfig, StageConfig
from emcot_vla.model.batch import TensorBatch, collate
from emcot_vla.model.checkpoint import read_checkpoint, restore_rng_state, save_checkpoint
from emcot_vla.model.codec import LatentCodec
from emcot_vla.model.mot import EXPERTS, MoTPolicy
from emcot_vla.tokenstream.packing import pack_samples
from emcot_vla.training.corpus import MixtureScheduler, TrainingCorpus
from emcot_vla.training.losses import COMPONENTS, compute_components, detach_components, weighted_total
from emcot_vla.utils.errors import ConfigurationError, DivergenceError
from emcot_vla.utils.io import write_json

PRETRAIN_WEIGHTS = (0.25, 0.5, 1.0)
FINETUNE_WEIGHTS = (1.0, 1.0, 1.0)


def warmup_factor(warmup_steps: int):
    """
    Линейный разогрев от 0 до 1 за ``warmup_steps`` шагов, затем константа.
    """

    def factor(step: int) -> float:
        if warmup_steps <= 0:
            return 1.0
        return min(1.0, step / warmup_steps)

    return factor


def optimization_step(
    model: MoTPolicy,
    batches: list[TensorBatch],
    optimizer: torch.optim.Optimizer,
    weights: tuple[float, float, float],
    generator: torch.Generator | None = None,
    grad_clip: float = 1.0,
    step: int = 0,
) -> tuple[float, dict[str, float | None]]:
    """
    Один шаг оптимизатора с накоплением градиента по ``batches``.

    Returns
    -------
    tuple[float, dict]
        Взвешенная сумма потерь и средние значения компонент.
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total_value = 0.0
    sums: dict[str, list[float]] = {}
    for batch in batches:
        components = compute_components(model, batch, generator)
        total = weighted_total(components, weights, step)
        if isinstance(total, torch.Tensor):
            (total / len(batches)).backward()
            total_value += float(total) / len(batches)
        for name, value in detach_components(components).items():
            if value is not None:
                sums.setdefault(name, []).append(value)
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    means = {name: sum(values) / len(values) for name, values in sums.items()}
    return total_value, {name: means.get(name) for name in COMPONENTS}


def pretrain_step(model, batch, optimizer, generator=None, weights=PRETRAIN_WEIGHTS, grad_clip=1.0, step=0):
    """
    Шаг предобучения: 0.25 (CE + CE_VQA) + 0.5 MSE + 1.0 L1.
    """
    return optimization_step(model, [batch], optimizer, weights, generator, grad_clip, step)[0]


def finetune_step(model, batch, optimizer, generator=None, weights=FINETUNE_WEIGHTS, grad_clip=1.0, step=0):
    """
    Шаг дообучения: CE + CE_VQA + MSE + L1 без весов.
    """
    return optimization_step(model, [batch], optimizer, weights, generator, grad_clip, step)[0]


@dataclass
class TrainReport:
    """
    Итог стадии обучения.

    Parameters
    ----------
    stage : str
        ``pretrain`` или ``finetune``.
    losses : list[dict]
        Записи по шагам: шаг, скорость обучения, сумма и компоненты.
    mixture_counts : dict[str, int]
        Число образцов каждого источника.
    wall_clock : float
        Время обучения, секунды.
    checkpoints : list[str]
        Пути сохранённых контрольных точек.
    """

    stage: str
    losses: list[dict[str, Any]] = field(default_factory=list)
    mixture_counts: dict[str, int] = field(default_factory=dict)
    wall_clock: float = 0.0
    checkpoints: list[str] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.losses)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.losses, columns=["step", "lr", "total", *COMPONENTS])

    def moving_average(self, window: int = 50) -> pd.Series:
        return self.to_frame()["total"].rolling(window, min_periods=1).mean()

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["steps"] = self.steps
        return data


class Trainer:
    """
    Обучение модели на одной стадии.

    Parameters
    ----------
    model : MoTPolicy
        Модель.
    config : RunConfig
        Конфигурация запуска.
    stage : StageConfig
        Параметры стадии (``config.pretrain`` или ``config.finetune``).
    corpus : TrainingCorpus
        Источники образцов.
    codec : LatentCodec | None
        Замороженный кодек (сохраняется в контрольные точки).
    """

    def __init__(
        self,
        model: MoTPolicy,
        config: RunConfig,
        stage: StageConfig,
        corpus: TrainingCorpus,
        codec: LatentCodec | None = None,
    ):
        if codec is not None and not codec.frozen:
            raise ConfigurationError("Кодек должен быть заморожен до обучения модели")
        self.model = model
        self.config = config
        self.stage = stage
        self.corpus = corpus
        self.codec = codec
        self.mixture = MixtureScheduler(stage.mixture)
        corpus.check(self.mixture.kinds)

        torch.manual_seed(stage.seed)
        self.generator = torch.Generator().manual_seed(stage.seed)
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=stage.lr, weight_decay=stage.weight_decay)
        self.scheduler = LambdaLR(self.optimizer, warmup_factor(stage.warmup_steps))
        self.step = 0
        self.report = TrainReport(stage.stage)
        self._initial_loss: float | None = None
        self._over = 0

    @property
    def regime(self) -> str:
        return f"{self.stage.stage}/{self.stage.emcot_mode}"

    @property
    def lr(self) -> float:
        return self.scheduler.get_last_lr()[0]

    def next_batch(self) -> TensorBatch:
        samples = self.corpus.batch(self.mixture, self.stage.batch_size)
        tokens = self.config.tokens
        packs = pack_samples(samples, tokens.max_len, tokens.isolate_noise_groups)
        return collate(packs, self.model.config)

    def _check_divergence(self, total: float) -> None:
        if self._initial_loss is None:
            self._initial_loss = total
            return
        if total > self.stage.divergence_factor * self._initial_loss:
            self._over += 1
        else:
            self._over = 0
        if self._over >= self.stage.divergence_patience:
            raise DivergenceError(
                f"Потери выше {self.stage.divergence_factor}x начальных ({self._initial_loss:.4f}) "
                f"{self._over} шагов подряд (шаг {self.step})"
            )

    def train_step(self) -> dict[str, Any]:
        lr = self.lr
        batches = [self.next_batch() for _ in range(self.stage.grad_accum)]
        total, components = optimization_step(
            self.model,
            batches,
            self.optimizer,
            self.stage.loss_weights,
            self.generator,
            self.stage.grad_clip,
            self.step,
        )
        self.scheduler.step()
        entry = {"step": self.step, "lr": lr, "total": total, **components}
        self.report.losses.append(entry)
        self.step += 1
        logger.debug("Шаг {}: {}", entry["step"], entry)
        self._check_divergence(total)
        return entry

    def checkpoint(self, path: Path | str) -> Path:
        extra = {
            "mixture": self.mixture.state_dict(),
            "corpus": self.corpus.state_dict(),
            "generator": self.generator.get_state(),
            "report": self.report.to_dict(),
            "divergence": {"initial": self._initial_loss, "over": self._over},
        }
        path = save_checkpoint(
            path,
            self.model,
            self.config,
            codec=self.codec,
            optimizer=self.optimizer,
            scheduler=self.scheduler,
            step=self.step,
            regime=self.regime,
            extra=extra,
        )
        self.report.checkpoints.append(str(path))
        return path

    def resume(self, path: Path | str) -> None:
        """
        Продолжение с контрольной точки той же стадии: веса, оптимизатор,
        планировщик, генераторы и состояние смеси.
        """
        payload = read_checkpoint(path)
        if payload["config"]["model"] != self.config.to_dict()["model"]:
            raise ConfigurationError("Контрольная точка несовместима с конфигурацией модели")
        state = dict(payload["shared"])
        for name in EXPERTS:
            state.update(payload["experts"][name])
        self.model.load_state_dict(state)
        self.step = int(payload["step"])
        if payload["regime"] != self.regime:
            logger.info("Новая стадия {} с весами из {}", self.regime, payload["regime"] or "—")
            self.step = 0
            return
        self.optimizer.load_state_dict(payload["optimizer"])
        self.scheduler.load_state_dict(payload["scheduler"])
        extra = payload["extra"]
        self.mixture.load_state_dict(extra["mixture"])
        self.corpus.load_state_dict(extra["corpus"])
        self.generator.set_state(extra["generator"])
        report = extra.get("report", {})
        self.report.losses = list(report.get("losses", []))
        self.report.checkpoints = list(report.get("checkpoints", []))
        self._initial_loss = extra["divergence"]["initial"]
        self._over = extra["divergence"]["over"]
        restore_rng_state(payload["rng"])

    def run(self, steps: int | None = None, out_dir: Path | str | None = None, show_progress: bool = True) -> TrainReport:
        """
        Обучение до ``steps`` шагов (по умолчанию ``total_steps`` стадии),
        с контрольными точками каждые ``checkpoint_every`` шагов.
        """
        steps = self.stage.total_steps if steps is None else steps
        started = time.perf_counter()
        bar = tqdm(total=steps, initial=self.step, desc=self.stage.stage, disable=not show_progress)
        while self.step < steps:
            entry = self.train_step()
            bar.update(1)
            bar.set_postfix(loss=f"{entry['total']:.4f}")
            if out_dir is not None and self.stage.checkpoint_every and self.step % self.stage.checkpoint_every == 0:
                self.checkpoint(Path(out_dir) / f"{self.stage.stage}-step{self.step:06d}.pt")
        bar.close()
        self.report.wall_clock += time.perf_counter() - started
        self.report.mixture_counts = dict(self.mixture.counts)
        if self.report.losses:
            logger.info(
                "Стадия {}: {} шагов, итоговые потери {:.4f}",
                self.stage.stage, self.step, self.report.losses[-1]["total"],
            )
        return self.report


def run_stage(
    model: MoTPolicy,
    config: RunConfig,
    stage_name: str,
    corpus: TrainingCorpus,
    out_dir: Path | str,
    codec: LatentCodec | None = None,
    resume: Path | str | None = None,
    steps: int | None = None,
) -> tuple[TrainReport, Path]:
    """
    Полная стадия: обучение, итоговая контрольная точка и JSON-отчёт.

    Returns
    -------
    tuple[TrainReport, Path]
        Отчёт и путь итоговой контрольной точки.
    """
    stage = getattr(config, stage_name)
    trainer = Trainer(model, config, stage, corpus, codec)
    if resume is not None:
        trainer.resume(resume)
    out_dir = Path(out_dir)
    report = trainer.run(steps, out_dir)
    final = trainer.checkpoint(out_dir / f"{stage_name}-final.pt")
    write_json(out_dir / f"{stage_name}-report.json", report.to_dict())
    return report, final
