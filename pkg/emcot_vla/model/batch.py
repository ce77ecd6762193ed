"""
Тензорное представление упаковок для модели.
"""

from dataclasses import dataclass, fields, replace

import numpy as np
import torch

from emcot_vla.config.configurations import ModelConfig
from emcot_vla.tokenstream.mask import ACT_NOISE, TEXT, VIS_CLEAN, VIS_NOISE, VIS_UND
from emcot_vla.tokenstream.packing import PackedSequence
from emcot_vla.utils.errors import InputError

IGNORE_INDEX = -100
PAD_ROLE = -1


@dataclass
class TensorBatch:
    """
    Выровненный батч упаковок.

    Все поля имеют первую размерность B (число упаковок) и вторую N (длина
    самой длинной упаковки). Шумовые входы ``latents``/``actions`` на позициях
    шумовых записей заполняются потоком (см. ``flow.add_noise``).

    Parameters
    ----------
    role : torch.Tensor
        (B, N) коды ролей; ``-1`` для выравнивания.
    token_ids : torch.Tensor
        (B, N) идентификаторы текстовых токенов.
    patches : torch.Tensor
        (B, N, P) патчи записей ``vis_und``.
    latents : torch.Tensor
        (B, N, C) латенты ``vis_clean`` и зашумлённые латенты ``vis_noise``.
    actions : torch.Tensor
        (B, N, 8) зашумлённые действия ``act_noise``.
    flow_t : torch.Tensor
        (B, N) время потока для шумовых записей.
    positions : torch.Tensor
        (B, N) позиции внутри своего образца.
    segment : torch.Tensor
        (B, N) номер образца внутри упаковки (``-1`` для выравнивания).
    group : torch.Tensor
        (B, N) номер шумовой группы (``-1`` вне групп).
    mask : torch.Tensor
        (B, N, N) разрешённые пары внимания.
    text_target, latent_target, action_target, loss : torch.Tensor
        Цели и флаги потерь.
    vqa : torch.Tensor
        (B, N) записи образцов VQA; их CE считается отдельной компонентой.
    """

    role: torch.Tensor
    token_ids: torch.Tensor
    patches: torch.Tensor
    latents: torch.Tensor
    actions: torch.Tensor
    flow_t: torch.Tensor
    positions: torch.Tensor
    segment: torch.Tensor
    group: torch.Tensor
    mask: torch.Tensor
    text_target: torch.Tensor
    latent_target: torch.Tensor
    action_target: torch.Tensor
    loss: torch.Tensor
    vqa: torch.Tensor

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.role.shape)

    def to(self, device: torch.device | str | None = None, dtype: torch.dtype | None = None) -> "TensorBatch":
        """
        Перенос на устройство; ``dtype`` меняет только вещественные поля.
        """
        changes = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if dtype is not None and value.is_floating_point():
                value = value.to(dtype=dtype)
            if device is not None:
                value = value.to(device=device)
            changes[f.name] = value
        return replace(self, **changes)

    def clone(self) -> "TensorBatch":
        return replace(self, **{f.name: getattr(self, f.name).clone() for f in fields(self)})

    def role_mask(self, *codes: int) -> torch.Tensor:
        out = torch.zeros_like(self.role, dtype=torch.bool)
        for code in codes:
            out |= self.role == code
        return out

    @property
    def noise(self) -> torch.Tensor:
        return self.role_mask(VIS_NOISE, ACT_NOISE)


def collate(packs: list[PackedSequence], config: ModelConfig) -> TensorBatch:
    """
    Сборка батча из упаковок: payload-ы и цели записей раскладываются по
    тензорам своих модальностей, маски упаковок выравниваются.
    """
    if not packs:
        raise InputError("Пустой батч")
    b = len(packs)
    n = max(len(pack) for pack in packs)
    p_dim = config.patch_size * config.patch_size * 3
    c_dim = config.latent_channels
    a_dim = config.action_dim

    role = np.full((b, n), PAD_ROLE, dtype=np.int64)
    token_ids = np.zeros((b, n), dtype=np.int64)
    patches = np.zeros((b, n, p_dim), dtype=np.float32)
    latents = np.zeros((b, n, c_dim), dtype=np.float32)
    actions = np.zeros((b, n, a_dim), dtype=np.float32)
    positions = np.zeros((b, n), dtype=np.int64)
    segment = np.full((b, n), -1, dtype=np.int64)
    group = np.full((b, n), -1, dtype=np.int64)
    mask = np.zeros((b, n, n), dtype=bool)
    text_target = np.full((b, n), IGNORE_INDEX, dtype=np.int64)
    latent_target = np.zeros((b, n, c_dim), dtype=np.float32)
    action_target = np.zeros((b, n, a_dim), dtype=np.float32)
    loss = np.zeros((b, n), dtype=bool)
    vqa = np.zeros((b, n), dtype=bool)

    for i, pack in enumerate(packs):
        length = len(pack)
        arrays = pack.arrays()
        role[i, :length] = arrays.role
        positions[i, :length] = arrays.position
        segment[i, :length] = arrays.sample
        group[i, :length] = arrays.group
        vqa[i, :length] = np.repeat([s.kind == "vqa" for s in pack.samples], [len(s) for s in pack.samples])
        mask[i, :length, :length] = pack.mask
        # строки выравнивания видят только себя
        pad = np.arange(length, n)
        mask[i, pad, pad] = True
        for j, record in enumerate(pack.records):
            code = arrays.role[j]
            loss[i, j] = record.loss
            if code == TEXT:
                token_ids[i, j] = record.payload
                if record.loss:
                    text_target[i, j] = record.target
            elif code == VIS_UND:
                patches[i, j] = record.payload
            elif code == VIS_CLEAN:
                latents[i, j] = record.payload
            elif code == VIS_NOISE and record.loss:
                latent_target[i, j] = record.target
            elif code == ACT_NOISE and record.loss:
                action_target[i, j] = record.target

    return TensorBatch(
        role=torch.from_numpy(role),
        token_ids=torch.from_numpy(token_ids),
        patches=torch.from_numpy(patches),
        latents=torch.from_numpy(latents),
        actions=torch.from_numpy(actions),
        flow_t=torch.zeros((b, n), dtype=torch.float32),
        positions=torch.from_numpy(positions),
        segment=torch.from_numpy(segment),
        group=torch.from_numpy(group),
        mask=torch.from_numpy(mask),
        text_target=torch.from_numpy(text_target),
        latent_target=torch.from_numpy(latent_target),
        action_target=torch.from_numpy(action_target),
        loss=torch.from_numpy(loss),
        vqa=torch.from_numpy(vqa),
    )
