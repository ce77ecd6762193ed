"""
Прямолинейный поток: x_t = (1 - t) * eps + t * x1, целевая скорость v* = x1 - eps.
"""

from typing import Callable

import torch

from emcot_vla.model.batch import TensorBatch
from emcot_vla.tokenstream.mask import ACT_NOISE, VIS_NOISE
from emcot_vla.utils.errors import SamplingError

FLOW_KINDS = {"vis": VIS_NOISE, "act": ACT_NOISE}


def interpolate(noise: torch.Tensor, x1: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    return (1.0 - t) * noise + t * x1


def _group_keys(batch: TensorBatch) -> tuple[torch.Tensor, int]:
    width = int(batch.group.max().clamp(min=0)) + 1
    keys = batch.segment.clamp(min=0) * width + batch.group.clamp(min=0)
    return keys, int(keys.max()) + 1


def add_noise(batch: TensorBatch, generator: torch.Generator | None = None) -> tuple[TensorBatch, torch.Tensor, torch.Tensor]:
    """
    Зашумление целей всех шумовых групп батча.

    Время t ~ U(0, 1) выбирается одно на группу, шум eps ~ N(0, I) на запись.

    Returns
    -------
    tuple[TensorBatch, torch.Tensor, torch.Tensor]
        Копия батча с заполненными входами шумовых записей и временем потока,
        целевые скорости для латентов (B, N, C) и действий (B, N, 8).
    """
    out = batch.clone()
    keys, n_keys = _group_keys(batch)
    b = batch.role.shape[0]
    dtype = batch.latents.dtype
    t_table = torch.rand((b, n_keys), generator=generator, dtype=dtype)
    t = torch.gather(t_table, 1, keys)

    vis = batch.role == VIS_NOISE
    act = batch.role == ACT_NOISE
    eps_vis = torch.randn(batch.latent_target.shape, generator=generator, dtype=dtype)
    eps_act = torch.randn(batch.action_target.shape, generator=generator, dtype=dtype)

    out.latents = torch.where(vis[..., None], interpolate(eps_vis, batch.latent_target, t[..., None]), batch.latents)
    out.actions = torch.where(act[..., None], interpolate(eps_act, batch.action_target, t[..., None]), batch.actions)
    out.flow_t = torch.where(vis | act, t, torch.zeros_like(t))
    v_vis = torch.where(vis[..., None], batch.latent_target - eps_vis, torch.zeros_like(eps_vis))
    v_act = torch.where(act[..., None], batch.action_target - eps_act, torch.zeros_like(eps_act))
    return out, v_vis, v_act


def euler_integrate(
    velocity_fn: Callable[[torch.Tensor, float], torch.Tensor],
    noise: torch.Tensor,
    steps: int,
) -> torch.Tensor:
    """
    Интегрирование dx/dt = v(x, t) методом Эйлера от t = 0 до t = 1 за ``steps`` равных шагов.

    Raises
    ------
    SamplingError
        Нечисловое значение на каком-либо шаге.
    """
    if steps < 1:
        raise ValueError("Число шагов потока должно быть не меньше 1")
    x = noise
    dt = 1.0 / steps
    for step in range(steps):
        v = velocity_fn(x, step * dt)
        x = x + dt * v
        if not torch.isfinite(x).all():
            raise SamplingError("Нечисловое значение при интегрировании потока", step)
    return x


@torch.no_grad()
def sample_flow(
    model,
    batch: TensorBatch,
    kind: str,
    steps: int,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """
    Выборка содержимого шумовых записей вида ``kind`` (``vis`` или ``act``).

    На каждом шаге модель заново прогоняется по всему батчу с обновлёнными
    входами шумовых записей.

    Returns
    -------
    torch.Tensor
        Значения на позициях шумовых записей: (B, N, C) для ``vis``, (B, N, 8) для ``act``;
        вне этих позиций нули.
    """
    code = FLOW_KINDS[kind]
    positions = (batch.role == code)[..., None]
    work = batch.clone()
    field = "latents" if kind == "vis" else "actions"
    shape = getattr(batch, field).shape
    noise = torch.randn(shape, generator=generator, dtype=getattr(batch, field).dtype) * positions

    def velocity(x: torch.Tensor, t: float) -> torch.Tensor:
        setattr(work, field, torch.where(positions, x, getattr(batch, field)))
        work.flow_t = torch.where(positions[..., 0], torch.full_like(work.flow_t, t), work.flow_t)
        hidden = model(work)
        v = model.velocity(hidden, kind)
        return v * positions

    return euler_integrate(velocity, noise, steps) * positions
