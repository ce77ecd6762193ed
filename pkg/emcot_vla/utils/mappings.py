import re

# Шаблон поиска устаревших написаний служебных токенов
alias_pattern = re.compile(r"<visual_(?:start|end)>")

# Словарь сопоставления псевдонимов и канонических служебных токенов
alias_mapper = {
    "<visual_start>": "<vision_start>",
    "<visual_end>": "<vision_end>",
}

# Названия осей: (положительное направление, отрицательное направление)
AXIS_NAMES = (
    ("forward", "backward"),
    ("left", "right"),
    ("up", "down"),
)

# Предложения для примитивов без направления
sentence_mapper = dict(
    idle="keep the arm still",
    grasp="close the gripper to grasp",
    release="open the gripper to release",
)


def replacer(s: str) -> str:
    """
    Функция, которая заменяет псевдонимы служебных токенов на канонические.

    Parameters
    ----------
    s : str
        Строка, в которой могут встречаться ``<visual_start>``/``<visual_end>``.

    Returns
    -------
    str
        Строка с каноническими токенами ``<vision_start>``/``<vision_end>``.
    """
    return alias_pattern.sub(lambda m: alias_mapper[m.group(0)], s)


def lookup_sentence(kind: str, direction: str = "") -> str:
    """
    Фраза на естественном языке для пары (вид примитива, направление).

    Parameters
    ----------
    kind : str
        Один из ``idle``, ``move``, ``grasp``, ``release``.
    direction : str
        Направление движения, непустое только для ``move``.

    Returns
    -------
    str
        Фиксированная фраза из таблицы соответствия.
    """
    if kind == "move":
        if direction == "stationary":
            return "hold the arm in place"
        return "move the arm " + " and ".join(direction.split("-"))
    if kind not in sentence_mapper:
        raise KeyError(f"Неизвестный вид примитива: {kind}")
    return sentence_mapper[kind]
