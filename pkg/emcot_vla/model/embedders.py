"""
Общие кодировщики входов и выходные головы модели.
"""

import math

import torch
from torch import nn

from emcot_vla.config.configurations import ModelConfig
from emcot_vla.model.batch import TensorBatch
from emcot_vla.tokenstream.mask import ACT_NOISE, TEXT, VIS_CLEAN, VIS_NOISE, VIS_UND


def sinusoidal_embedding(
    time: torch.Tensor, dimension: int, min_period: float = 4e-3, max_period: float = 4.0
) -> torch.Tensor:
    """
    Синусно-косинусное вложение скалярного времени потока.

    Parameters
    ----------
    time : torch.Tensor
        Время произвольной формы (...,).
    dimension : int
        Чётная размерность вложения.

    Returns
    -------
    torch.Tensor
        Тензор (..., dimension).
    """
    if dimension % 2:
        raise ValueError(f"Размерность вложения ({dimension}) должна быть чётной")
    fraction = torch.linspace(0.0, 1.0, dimension // 2, dtype=time.dtype, device=time.device)
    period = min_period * (max_period / min_period) ** fraction
    angle = time[..., None] * (2 * math.pi / period)
    return torch.cat([torch.sin(angle), torch.cos(angle)], dim=-1)


class Embedders(nn.Module):
    """
    Кодировщики записей по ролям.

    Текст: таблица вложений (она же выходная голова). ``vis_und``: линейная
    проекция патча. ``vis_clean``/``vis_noise``: линейная проекция латента.
    ``act_noise``: линейная проекция действия. К шумовым записям добавляется
    вложение времени потока.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.d_model = d
        self.text = nn.Embedding(config.vocab_size, d)
        self.patch = nn.Linear(config.patch_size * config.patch_size * 3, d)
        self.latent_in = nn.Linear(config.latent_channels, d)
        self.latent_out = nn.Linear(d, config.latent_channels)
        self.action_in = nn.Linear(config.action_dim, d)
        self.action_out = nn.Linear(d, config.action_dim)
        self.time = nn.Linear(d, d)
        nn.init.normal_(self.text.weight, std=d**-0.5)

    def forward(self, batch: TensorBatch) -> torch.Tensor:
        role = batch.role[..., None]
        x = self.text(batch.token_ids) * (role == TEXT)
        x = x + self.patch(batch.patches) * (role == VIS_UND)
        x = x + self.latent_in(batch.latents) * ((role == VIS_CLEAN) | (role == VIS_NOISE))
        x = x + self.action_in(batch.actions) * (role == ACT_NOISE)
        noise = (role == VIS_NOISE) | (role == ACT_NOISE)
        time = self.time(sinusoidal_embedding(batch.flow_t, self.d_model))
        return x + time * noise

    def text_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.text.weight.T

    def velocity(self, hidden: torch.Tensor, kind: str) -> torch.Tensor:
        if kind == "vis":
            return self.latent_out(hidden)
        if kind == "act":
            return self.action_out(hidden)
        raise ValueError(f"Неизвестный вид потока: {kind}")
