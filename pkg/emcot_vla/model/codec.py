"""
Латентный кодек генеративной ветви: небольшой свёрточный автокодировщик
кадр (H, W, 3) <-> сетка латентов (g, g, C).

Кодек обучается отдельно до основной модели и затем замораживается.
"""

import hashlib
import math

import numpy as np
import torch
from loguru import logger
from torch import nn
from tqdm import tqdm

from emcot_vla.config.configurations import ModelConfig
from emcot_vla.tokenstream.assemble import patchify
from emcot_vla.utils.errors import CodecFitError, InputError


def _down(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.SiLU())


def _up(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1), nn.SiLU())


class LatentCodec(nn.Module):
    """
    Автокодировщик с понижением разрешения в ``codec_downsample`` раз.

    Вход и выход в [0, 1], формат (B, 3, H, W); латенты (B, C, g, g).
    """

    def __init__(self, config: ModelConfig, width: int = 32):
        super().__init__()
        levels = int(round(math.log2(config.codec_downsample)))
        if 2**levels != config.codec_downsample:
            raise InputError("codec_downsample должен быть степенью двойки")
        self.image_size = config.image_size
        self.latent_grid = config.latent_grid
        self.latent_channels = config.latent_channels

        down = [_down(3, width)] + [_down(width, width) for _ in range(levels - 1)]
        self.encoder = nn.Sequential(*down, nn.Conv2d(width, config.latent_channels, 3, padding=1))
        up = [_up(width, width) for _ in range(levels)]
        self.decoder = nn.Sequential(
            nn.Conv2d(config.latent_channels, width, 3, padding=1),
            nn.SiLU(),
            *up,
            nn.Conv2d(width, 3, 3, padding=1),
            nn.Sigmoid(),
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def freeze(self) -> "LatentCodec":
        self.requires_grad_(False)
        self.eval()
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """
    (N, H, W, 3) uint8 -> (N, 3, H, W) float32 в [0, 1].
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    return torch.from_numpy(images.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    x = x.detach().clamp(0.0, 1.0).permute(0, 2, 3, 1).cpu().numpy()
    return np.round(x * 255.0).astype(np.uint8)


def psnr(mse: float) -> float:
    return float("inf") if mse <= 0 else 10.0 * math.log10(1.0 / mse)


def parameter_hash(module: nn.Module) -> str:
    """
    SHA-256 весов модуля; используется для проверки заморозки.
    """
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@torch.no_grad()
def reconstruction_mse(codec: LatentCodec, images: np.ndarray, batch: int = 256) -> float:
    total, count = 0.0, 0
    for start in range(0, len(images), batch):
        x = images_to_tensor(images[start : start + batch])
        total += float(((codec(x) - x) ** 2).sum())
        count += x.numel()
    return total / max(count, 1)


def fit_latent_codec(
    images: np.ndarray,
    config: ModelConfig | None = None,
    holdout: float = 0.1,
    show_progress: bool = True,
) -> tuple[LatentCodec, dict]:
    """
    Обучение кодека на кадрах среды.

    Parameters
    ----------
    images : np.ndarray
        Кадры (N, H, W, 3) uint8, не меньше ``codec_min_images``.
    config : ModelConfig
        Размерности и параметры обучения кодека.
    holdout : float
        Доля кадров для контрольной оценки.

    Returns
    -------
    tuple[LatentCodec, dict]
        Замороженный кодек и отчёт: кривая потерь, MSE и PSNR на контрольных кадрах.

    Raises
    ------
    CodecFitError
        Контрольная ошибка выше ``codec_mse_threshold`` или PSNR ниже ``codec_psnr_floor``.
    """
    config = config or ModelConfig()
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (config.image_size, config.image_size, 3):
        raise InputError(f"Ожидались кадры (N, {config.image_size}, {config.image_size}, 3), получено {images.shape}")
    if len(images) < config.codec_min_images:
        raise InputError(f"Для обучения кодека нужно не меньше {config.codec_min_images} кадров, получено {len(images)}")

    generator = torch.Generator().manual_seed(config.seed)
    order = torch.randperm(len(images), generator=generator).numpy()
    n_hold = max(1, int(len(images) * holdout))
    held, train = images[order[:n_hold]], images[order[n_hold:]]

    torch.manual_seed(config.seed)
    codec = LatentCodec(config)
    optimizer = torch.optim.Adam(codec.parameters(), lr=config.codec_lr)
    curve: list[float] = []
    steps = tqdm(range(config.codec_steps), desc="codec", disable=not show_progress)
    for _ in steps:
        index = torch.randint(len(train), (config.codec_batch,), generator=generator).numpy()
        x = images_to_tensor(train[index])
        loss = torch.mean((codec(x) - x) ** 2)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        curve.append(float(loss))

    codec.freeze()
    mse = reconstruction_mse(codec, held)
    report = {"loss_curve": curve, "holdout_mse": mse, "holdout_psnr": psnr(mse), "images": len(images)}
    logger.info("Кодек: MSE {:.2e}, PSNR {:.1f} дБ на {} контрольных кадрах", mse, report["holdout_psnr"], n_hold)
    if mse > config.codec_mse_threshold or report["holdout_psnr"] < config.codec_psnr_floor:
        raise CodecFitError(
            f"Кодек не сошёлся: MSE {mse:.2e} (порог {config.codec_mse_threshold:.0e}), "
            f"PSNR {report['holdout_psnr']:.1f} дБ (порог {config.codec_psnr_floor})",
            curve,
        )
    return codec, report


@torch.no_grad()
def encode_latents(codec: LatentCodec, image: np.ndarray) -> np.ndarray:
    """
    Латенты кадра в виде записей (g*g, C).
    """
    image = np.asarray(image)
    if image.shape != (codec.image_size, codec.image_size, 3):
        raise InputError(f"Ожидался кадр {codec.image_size}x{codec.image_size}x3, получено {image.shape}")
    z = codec.encode(images_to_tensor(image))[0]
    return z.permute(1, 2, 0).reshape(-1, codec.latent_channels).cpu().numpy().astype(np.float32)


@torch.no_grad()
def decode_latents(codec: LatentCodec, latents: np.ndarray | torch.Tensor) -> np.ndarray:
    """
    Записи (g*g, C) обратно в кадр (H, W, 3) uint8.
    """
    z = torch.as_tensor(np.asarray(latents, dtype=np.float32))
    g = codec.latent_grid
    z = z.reshape(g, g, codec.latent_channels).permute(2, 0, 1)[None]
    return tensor_to_images(codec.decode(z))[0]


def encode_observation(codec: LatentCodec, image: np.ndarray, patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Двойной путь кадра: патчи семантической ветви и латенты кодека.
    """
    latents = encode_latents(codec, image)
    return patchify(image, patch_size), latents


def save_codec(path, codec: LatentCodec, report: dict | None = None) -> None:
    report = dict(report or {})
    torch.save(
        {
            "format_version": 1,
            "image_size": codec.image_size,
            "latent_grid": codec.latent_grid,
            "latent_channels": codec.latent_channels,
            "state": codec.state_dict(),
            "report": {key: value for key, value in report.items() if key != "loss_curve"},
        },
        path,
    )


def load_codec(path, config: ModelConfig) -> LatentCodec:
    """
    Загрузка замороженного кодека; размерности должны совпадать с конфигурацией.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    expected = (config.image_size, config.latent_grid, config.latent_channels)
    saved = (payload["image_size"], payload["latent_grid"], payload["latent_channels"])
    if saved != expected:
        raise InputError(f"Кодек {path} обучен для {saved}, конфигурация требует {expected}")
    codec = LatentCodec(config)
    codec.load_state_dict(payload["state"])
    return codec.freeze()
