"""
Смесь трансформеров: три эксперта с раздельными параметрами (понимание,
генерация изображения, действие) и общим самовниманием по всей упаковке.
"""

import math
from typing import Callable

import torch
from torch import nn

from emcot_vla.config.configurations import ModelConfig
from emcot_vla.model.batch import TensorBatch
from emcot_vla.model.embedders import Embedders
from emcot_vla.tokenstream.records import ROLES
from emcot_vla.utils.errors import InputError

EXPERTS = ("und", "gen", "act")
ROUTING = {
    "text": "und",
    "vis_und": "und",
    "vis_clean": "gen",
    "vis_noise": "gen",
    "act_noise": "act",
}
ATTENTION_MODES = ("joint", "identity")


def route_table(device: torch.device | None = None) -> torch.Tensor:
    """
    Код роли -> номер эксперта; последний элемент для выравнивания (роль -1).
    """
    codes = [EXPERTS.index(ROUTING[role]) for role in ROLES] + [0]
    return torch.tensor(codes, dtype=torch.long, device=device)


def rotary(positions: torch.Tensor, head_dim: int, base: float, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    inv_freq = 1.0 / base ** (torch.arange(0, head_dim, 2, dtype=dtype, device=positions.device) / head_dim)
    angle = positions.to(dtype)[..., None] * inv_freq
    # (B, 1, N, head_dim / 2)
    return torch.cos(angle)[:, None], torch.sin(angle)[:, None]


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    x1, x2 = x[..., ::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


class ExpertBlock(nn.Module):
    """
    Параметры одного эксперта в одном слое.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.norm_attn = nn.RMSNorm(d)
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.out = nn.Linear(d, d, bias=False)
        self.norm_ffn = nn.RMSNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, config.ffn_mult * d),
            nn.GELU(),
            nn.Linear(config.ffn_mult * d, d),
        )


def routed(
    experts: nn.ModuleDict,
    route: torch.Tensor,
    x: torch.Tensor,
    fn: Callable[[nn.Module, torch.Tensor], torch.Tensor],
    out_dim: int,
) -> torch.Tensor:
    """
    Применение ``fn`` эксперта к позициям, маршрутизированным на него.
    """
    out = x.new_zeros(*x.shape[:-1], out_dim)
    for index, name in enumerate(EXPERTS):
        selected = route == index
        if selected.any():
            out[selected] = fn(experts[name], x[selected])
    return out


class MoTLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.d_model = config.d_model
        self.experts = nn.ModuleDict({name: ExpertBlock(config) for name in EXPERTS})

    def attention(
        self,
        x: torch.Tensor,
        route: torch.Tensor,
        rope: tuple[torch.Tensor, torch.Tensor],
        mask: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, _ = x.shape
        qkv = routed(self.experts, route, x, lambda e, h: e.qkv(e.norm_attn(h)), 3 * self.d_model)
        q, k, v = qkv.view(b, n, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k = apply_rotary(q, *rope), apply_rotary(k, *rope)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask[:, None], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        mixed = (weights @ v).transpose(1, 2).reshape(b, n, self.d_model)
        return routed(self.experts, route, mixed, lambda e, h: e.out(h), self.d_model), weights

    def forward(
        self,
        x: torch.Tensor,
        route: torch.Tensor,
        rope: tuple[torch.Tensor, torch.Tensor],
        mask: torch.Tensor,
        attention_mode: str = "joint",
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        weights = None
        if attention_mode == "joint":
            update, weights = self.attention(x, route, rope, mask)
            x = x + update
        x = x + routed(self.experts, route, x, lambda e, h: e.ffn(e.norm_ffn(h)), self.d_model)
        return x, weights


class MoTPolicy(nn.Module):
    """
    Политика на основе смеси трансформеров.

    Parameters
    ----------
    config : ModelConfig
        Размерности модели.
    attention_mode : str
        ``joint`` (общее самовнимание) или ``identity`` (подслой внимания
        пропускается; режим диагностики локальности экспертов).
    """

    def __init__(self, config: ModelConfig, attention_mode: str = "joint"):
        super().__init__()
        if attention_mode not in ATTENTION_MODES:
            raise InputError(f"Неизвестный режим внимания: {attention_mode}")
        self.config = config
        self.attention_mode = attention_mode
        self.embedders = Embedders(config)
        self.layers = nn.ModuleList(MoTLayer(config) for _ in range(config.n_layers))
        self.final_norm = nn.ModuleDict({name: nn.RMSNorm(config.d_model) for name in EXPERTS})

    def route(self, batch: TensorBatch) -> torch.Tensor:
        table = route_table(batch.role.device)
        return table[batch.role % table.numel()]

    def _run(self, batch: TensorBatch, keep_weights: bool) -> tuple[torch.Tensor, list[torch.Tensor]]:
        b, n = batch.role.shape
        if batch.mask.shape != (b, n, n):
            raise InputError(f"Форма маски {tuple(batch.mask.shape)} не согласована с батчем {(b, n)}")
        route = self.route(batch)
        x = self.embedders(batch)
        rope = rotary(batch.positions, self.config.head_dim, self.config.rope_base, x.dtype)
        collected = []
        for layer in self.layers:
            x, weights = layer(x, route, rope, batch.mask, self.attention_mode)
            if keep_weights and weights is not None:
                collected.append(weights.detach())
        x = routed(self.final_norm, route, x, lambda norm, h: norm(h), self.config.d_model)
        return x, collected

    def forward(self, batch: TensorBatch) -> torch.Tensor:
        """
        Скрытые состояния (B, N, d_model) для всех записей батча.
        """
        hidden, _ = self._run(batch, keep_weights=False)
        return hidden

    @torch.no_grad()
    def attention_weights(self, batch: TensorBatch) -> list[torch.Tensor]:
        """
        Вероятности внимания каждого слоя, (B, H, N, N).
        """
        _, weights = self._run(batch, keep_weights=True)
        return weights

    def text_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.embedders.text_logits(hidden)

    def velocity(self, hidden: torch.Tensor, kind: str) -> torch.Tensor:
        return self.embedders.velocity(hidden, kind)

    def parameter_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        """
        Параметры по группам: три эксперта и общие кодировщики.
        """
        groups: dict[str, dict[str, nn.Parameter]] = {name: {} for name in (*EXPERTS, "shared")}
        for name, param in self.named_parameters():
            parts = name.split(".")
            if parts[0] == "layers":
                groups[parts[3]][name] = param
            elif parts[0] == "final_norm":
                groups[parts[1]][name] = param
            else:
                groups["shared"][name] = param
        return groups

    def expert_state_dicts(self) -> dict[str, dict[str, torch.Tensor]]:
        return {
            group: {name: p.detach().clone() for name, p in params.items()}
            for group, params in self.parameter_groups().items()
        }

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
