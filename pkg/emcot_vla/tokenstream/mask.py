"""
Маска внимания для упакованных последовательностей.

Правила (разрешение i -> j):

* записи разных образцов не видят друг друга;
* текст причинный: j <= i, шумовые записи недоступны;
* визуальные записи одного кадра видят друг друга в обе стороны,
  остальные записи только предшествующие и не шумовые;
* шум видит свою группу целиком, чужие шумовые группы закрыты
  (``isolate_noise_groups``), из прочего только предшествующие записи,
  кроме чистых латентов своего целевого кадра.
"""

from pathlib import Path

import numpy as np
import pandas as pd

from emcot_vla.tokenstream.records import ROLE_CODES, RecordArrays, TokenRecord
from emcot_vla.utils.errors import InputError

TEXT = ROLE_CODES["text"]
VIS_UND = ROLE_CODES["vis_und"]
VIS_CLEAN = ROLE_CODES["vis_clean"]
VIS_NOISE = ROLE_CODES["vis_noise"]
ACT_NOISE = ROLE_CODES["act_noise"]


def mask_from_arrays(arrays: RecordArrays, isolate_noise_groups: bool = True) -> np.ndarray:
    """
    Векторизованное построение маски по массивам полей записей.

    Returns
    -------
    np.ndarray
        Булева матрица (n, n); ``mask[i, j]`` означает, что i видит j.
    """
    n = len(arrays)
    index = np.arange(n)
    earlier = index[None, :] < index[:, None]
    earlier_or_self = index[None, :] <= index[:, None]
    same_sample = arrays.sample[:, None] == arrays.sample[None, :]

    role = arrays.role
    noise = (role == VIS_NOISE) | (role == ACT_NOISE)
    visual = (role == VIS_UND) | (role == VIS_CLEAN)
    text = role == TEXT

    noise_j = noise[None, :]
    text_rows = text[:, None] & ~noise_j & earlier_or_self

    same_frame = (
        visual[:, None]
        & visual[None, :]
        & (arrays.frame[:, None] == arrays.frame[None, :])
        & (arrays.frame[:, None] >= 0)
    )
    visual_rows = visual[:, None] & ~noise_j & (same_frame | earlier)

    same_group = noise[:, None] & noise_j & (arrays.group[:, None] == arrays.group[None, :])
    other_noise = noise[:, None] & noise_j & ~same_group & earlier
    own_target = (
        (role[None, :] == VIS_CLEAN)
        & (arrays.target_frame[:, None] >= 0)
        & (arrays.frame[None, :] == arrays.target_frame[:, None])
    )
    noise_rows = noise[:, None] & (same_group | (~noise_j & earlier & ~own_target))
    if not isolate_noise_groups:
        noise_rows |= other_noise

    return same_sample & (text_rows | visual_rows | noise_rows)


def build_attention_mask(
    records: list[TokenRecord],
    isolate_noise_groups: bool = True,
    samples: list[int] | None = None,
) -> np.ndarray:
    """
    Маска внимания для списка записей одной упаковки.

    Parameters
    ----------
    records : list[TokenRecord]
        Записи в порядке последовательности.
    isolate_noise_groups : bool
        Запрещать внимание между разными шумовыми группами одного образца.
    samples : list[int] | None
        Номера образцов, если они отличаются от ``record.sample``.
    """
    return mask_from_arrays(RecordArrays.from_records(records, samples), isolate_noise_groups)


def inspect_mask(mask: np.ndarray, path: Path | str, fmt: str | None = None) -> Path:
    """
    Выгрузка маски для просмотра: PGM (P2, белый = разрешено) или CSV из 0/1.

    Формат определяется по ``fmt`` или расширению файла.
    """
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "pgm").lower()
    grid = np.asarray(mask, dtype=bool).astype(np.uint8)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise InputError(f"Маска должна быть квадратной, получено {grid.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    match fmt:
        case "pgm":
            rows = "\n".join(" ".join(str(v) for v in row) for row in grid * 255)
            path.write_text(f"P2\n{grid.shape[1]} {grid.shape[0]}\n255\n{rows}\n", encoding="ascii")
        case "csv":
            pd.DataFrame(grid).to_csv(path, header=False, index=False)
        case _:
            raise InputError(f"Неизвестный формат выгрузки маски: {fmt}")
    return path


def demo_emcot_records() -> list[TokenRecord]:
    """
    Игрушечная раскладка ``[t1, t2 | u1, u2 | n1, n2 | g1 | a1]``.
    """
    return [
        TokenRecord("text", payload=0),
        TokenRecord("text", payload=1),
        TokenRecord("vis_und", frame=0),
        TokenRecord("vis_und", frame=0),
        TokenRecord("vis_noise", group=0, target_frame=1),
        TokenRecord("vis_noise", group=0, target_frame=1),
        TokenRecord("vis_clean", frame=1),
        TokenRecord("act_noise", group=1),
    ]


def demo_pretrain_records() -> list[TokenRecord]:
    """
    Упаковка из трёх игрушечных образцов предобучения: VQA, VG и AP.
    """
    vqa = [
        TokenRecord("vis_und", frame=0, sample=0),
        TokenRecord("vis_und", frame=0, sample=0),
        TokenRecord("text", payload=0, sample=0),
        TokenRecord("text", payload=1, sample=0),
    ]
    vg = [
        TokenRecord("vis_und", frame=0, sample=1),
        TokenRecord("vis_clean", frame=0, sample=1),
        TokenRecord("text", payload=0, sample=1),
        TokenRecord("vis_noise", group=0, target_frame=1, sample=1),
        TokenRecord("vis_noise", group=0, target_frame=1, sample=1),
    ]
    ap = [
        TokenRecord("vis_und", frame=0, sample=2),
        TokenRecord("vis_clean", frame=0, sample=2),
        TokenRecord("text", payload=0, sample=2),
        TokenRecord("act_noise", group=0, sample=2),
        TokenRecord("act_noise", group=0, sample=2),
    ]
    return vqa + vg + ap
