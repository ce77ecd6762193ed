"""
Компоненты функции потерь и их взвешенная сумма.

CE по текстовым записям с потерями (предсказание из предыдущей позиции),
отдельно для рассуждений и для ответов VQA, MSE скорости потока для латентов
подцели, L1 скорости потока для действий.
"""

import math

import torch
import torch.nn.functional as F

from emcot_vla.model.batch import IGNORE_INDEX, TensorBatch
from emcot_vla.model.flow import add_noise
from emcot_vla.tokenstream.mask import ACT_NOISE, VIS_NOISE
from emcot_vla.utils.errors import NonFiniteLossError

COMPONENTS = ("ce", "vqa_ce", "mse", "l1")

# индекс веса в (w_CE, w_MSE, w_L1); ответы VQA делят вес CE
WEIGHT_INDEX = {"ce": 0, "vqa_ce": 0, "mse": 1, "l1": 2}


def text_ce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor | None:
    """
    Кросс-энтропия следующего токена: логиты позиции j-1 против цели позиции j.

    Returns
    -------
    torch.Tensor | None
        Среднее по записям с целью или ``None``, если таких записей нет.
    """
    shifted = targets[:, 1:]
    if not (shifted != IGNORE_INDEX).any():
        return None
    return F.cross_entropy(
        logits[:, :-1].reshape(-1, logits.shape[-1]),
        shifted.reshape(-1),
        ignore_index=IGNORE_INDEX,
    )


def flow_loss(predicted: torch.Tensor, target: torch.Tensor, selected: torch.Tensor, kind: str) -> torch.Tensor | None:
    """
    Ошибка скорости потока на выбранных позициях: MSE для ``vis``, L1 для ``act``.
    """
    if not selected.any():
        return None
    diff = predicted[selected] - target[selected]
    if kind == "vis":
        return diff.pow(2).mean()
    return diff.abs().mean()


def compute_components(
    model,
    batch: TensorBatch,
    generator: torch.Generator | None = None,
) -> dict[str, torch.Tensor | None]:
    """
    Прямой проход с зашумлением и расчёт четырёх компонент потерь.
    """
    noisy, v_vis, v_act = add_noise(batch, generator)
    hidden = model(noisy)
    logits = model.text_logits(hidden)
    ce = text_ce(logits, batch.text_target.masked_fill(batch.vqa, IGNORE_INDEX))
    vqa_ce = text_ce(logits, batch.text_target.masked_fill(~batch.vqa, IGNORE_INDEX))
    vis = batch.loss & (batch.role == VIS_NOISE)
    act = batch.loss & (batch.role == ACT_NOISE)
    mse = flow_loss(model.velocity(hidden, "vis"), v_vis, vis, "vis")
    l1 = flow_loss(model.velocity(hidden, "act"), v_act, act, "act")
    return {"ce": ce, "vqa_ce": vqa_ce, "mse": mse, "l1": l1}


def weighted_total(
    components: dict[str, torch.Tensor | float | None],
    weights: tuple[float, float, float],
    step: int = 0,
) -> torch.Tensor | float:
    """
    Сумма w_CE * (CE + CE_VQA) + w_MSE * MSE + w_L1 * L1; отсутствующие
    компоненты дают 0.

    Raises
    ------
    NonFiniteLossError
        Компонента не является конечным числом.
    """
    total: torch.Tensor | float = 0.0
    for name in COMPONENTS:
        weight = weights[WEIGHT_INDEX[name]]
        value = components.get(name)
        if value is None:
            continue
        if not math.isfinite(float(value)):
            raise NonFiniteLossError(name, step)
        total = total + weight * value
    return total


def detach_components(components: dict[str, torch.Tensor | None]) -> dict[str, float | None]:
    return {name: None if value is None else float(value) for name, value in components.items()}
