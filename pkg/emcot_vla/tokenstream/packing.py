from dataclasses import dataclass, field

import numpy as np

from emcot_vla.tokenstream.mask import mask_from_arrays
from emcot_vla.tokenstream.records import RecordArrays, Sample, TokenRecord
from emcot_vla.utils.errors import SplitError


def ffd_bins(lengths: list[int], max_len: int) -> list[list[int]]:
    """
    Упаковка «первый подходящий по убыванию».

    Parameters
    ----------
    lengths : list[int]
        Длины последовательностей.
    max_len : int
        Вместимость одной упаковки.

    Returns
    -------
    list[list[int]]
        Индексы последовательностей по упаковкам в порядке их открытия.
    """
    for index, length in enumerate(lengths):
        if length > max_len:
            raise SplitError(
                f"Последовательность {index} длиной {length} превышает max_len={max_len}: "
                "уменьшите model.context_frames, model.chunk или разрешение кадра, либо увеличьте tokens.max_len"
            )
    order = sorted(range(len(lengths)), key=lambda i: -lengths[i])
    bins: list[list[int]] = []
    free: list[int] = []
    for index in order:
        for b, room in enumerate(free):
            if lengths[index] <= room:
                bins[b].append(index)
                free[b] -= lengths[index]
                break
        else:
            bins.append([index])
            free.append(max_len - lengths[index])
    return bins


@dataclass
class PackedSequence:
    """
    Несколько образцов, склеенных в одну последовательность длины не больше ``max_len``.
    """

    samples: list[Sample]
    max_len: int
    isolate_noise_groups: bool = True
    _mask: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if len(self) > self.max_len:
            raise SplitError(f"Упаковка длиной {len(self)} превышает max_len={self.max_len}")

    def __len__(self) -> int:
        return sum(len(sample) for sample in self.samples)

    @property
    def records(self) -> list[TokenRecord]:
        return [record for sample in self.samples for record in sample.records]

    @property
    def segment_ids(self) -> np.ndarray:
        return np.concatenate(
            [np.full(len(sample), i, dtype=np.int64) for i, sample in enumerate(self.samples)]
        )

    @property
    def segments(self) -> list[tuple[int, int]]:
        """
        Границы образцов [start, end) внутри упаковки.
        """
        out, start = [], 0
        for sample in self.samples:
            out.append((start, start + len(sample)))
            start += len(sample)
        return out

    def arrays(self) -> RecordArrays:
        return RecordArrays.from_records(self.records, list(self.segment_ids))

    @property
    def mask(self) -> np.ndarray:
        if self._mask is None:
            self._mask = mask_from_arrays(self.arrays(), self.isolate_noise_groups)
            self._mask.setflags(write=False)
        return self._mask


def pack_samples(samples: list[Sample], max_len: int, isolate_noise_groups: bool = True) -> list[PackedSequence]:
    """
    Упаковка образцов в последовательности не длиннее ``max_len``.
    """
    bins = ffd_bins([len(sample) for sample in samples], max_len)
    return [
        PackedSequence([samples[i] for i in members], max_len, isolate_noise_groups) for members in bins
    ]
