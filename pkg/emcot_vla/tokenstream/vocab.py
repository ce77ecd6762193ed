"""
Словарь: служебные токены, символы и небольшой список слов.
"""

import re
import string
from dataclasses import dataclass, field
from typing import ClassVar

from emcot_vla.utils.errors import ConfigurationError
from emcot_vla.utils.mappings import replacer

SPECIAL_TOKENS = (
    "<pad>",
    "<eos>",
    "<unk>",
    "<think_start>",
    "<think_end>",
    "<plan_start>",
    "<plan_end>",
    "<subtask_start>",
    "<subtask_end>",
    "<move_start>",
    "<move_end>",
    "<vision_start>",
    "<vision_end>",
    "<action_start>",
    "<action_end>",
)

WORD_LIST = (
    "the", "arm", "arms", "move", "left", "right", "forward", "backward", "up", "down",
    "and", "then", "gripper", "close", "open", "grasp", "release", "keep", "still", "hold",
    "place", "block", "ball", "plate", "button", "zone", "red", "blue", "green", "yellow",
    "orange", "purple", "cyan", "gray", "pink", "brown", "white", "pick", "put", "stack",
    "press", "sweep", "push", "into", "on", "to", "it", "of", "from", "with", "my", "will",
    "now", "need", "see", "so", "table", "center", "pass", "bring", "lower", "behind",
    "above", "what", "color", "is", "how", "many", "objects", "are", "or", "closed", "one",
    "two", "three", "four", "five", "six", "seven", "eight", "zero", "state", "question",
    "answer", "hand", "in", "stays", "performs", "moves", "grasps", "releases", "both",
)

CHARACTERS = tuple(string.printable[:95])


@dataclass
class Vocabulary:
    """
    Токенизатор: служебные токены, затем символы ASCII, затем слова.

    Слово из ``WORD_LIST`` кодируется одним токеном, если совпадает целиком
    с последовательностью строчных букв; остальное кодируется посимвольно.
    Символы вне алфавита заменяются ``<unk>``.
    """

    size_limit: int = 512
    tokens: list[str] = field(init=False)
    index: dict[str, int] = field(init=False)

    special_pattern: ClassVar[re.Pattern] = re.compile(
        "|".join(re.escape(token) for token in SPECIAL_TOKENS)
    )
    word_pattern: ClassVar[re.Pattern] = re.compile(r"[a-z]+")

    def __post_init__(self):
        self.tokens = list(SPECIAL_TOKENS) + list(CHARACTERS) + list(WORD_LIST)
        if len(self.tokens) > self.size_limit:
            raise ConfigurationError(f"Словарь ({len(self.tokens)}) превышает {self.size_limit} токенов")
        self.index = {token: i for i, token in enumerate(self.tokens)}
        self._words = frozenset(WORD_LIST)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index[token]

    @property
    def special_ids(self) -> set[int]:
        return set(range(len(SPECIAL_TOKENS)))

    def is_special(self, token_id: int) -> bool:
        return 0 <= token_id < len(SPECIAL_TOKENS)

    def _encode_plain(self, text: str, out: list[int]) -> None:
        position = 0
        for match in self.word_pattern.finditer(text):
            self._encode_chars(text[position : match.start()], out)
            word = match.group(0)
            if word in self._words:
                out.append(self.index[word])
            else:
                self._encode_chars(word, out)
            position = match.end()
        self._encode_chars(text[position:], out)

    def _encode_chars(self, text: str, out: list[int]) -> None:
        unk = self.index["<unk>"]
        out.extend(self.index.get(ch, unk) for ch in text)

    def encode(self, text: str) -> list[int]:
        """
        Кодирование строки; устаревшие ``<visual_start>``/``<visual_end>`` приводятся
        к каноническим токенам.
        """
        text = replacer(text)
        out: list[int] = []
        position = 0
        for match in self.special_pattern.finditer(text):
            self._encode_plain(text[position : match.start()], out)
            out.append(self.index[match.group(0)])
            position = match.end()
        self._encode_plain(text[position:], out)
        return out

    def decode(self, ids: list[int]) -> str:
        return "".join(self.tokens[i] for i in ids)
