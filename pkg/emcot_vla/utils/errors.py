"""
Иерархия ошибок пакета.

Ошибки валидации (код выхода 1) наследуют ``ValueError``, ошибки выполнения
(код выхода 2) наследуют ``RuntimeError``.
"""


class EmcotError(Exception):
    exit_code: int = 2


class ValidationError(EmcotError, ValueError):
    """
    Нарушение контракта входных данных.

    Parameters
    ----------
    message : str
        Текст ошибки.
    issues : list[str] | None
        Список конкретных нарушений (например, записи с пересечением кадров).
    """

    exit_code = 1

    def __init__(self, message: str, issues: list[str] | None = None):
        super().__init__(message)
        self.issues = list(issues or [])

    def __str__(self) -> str:
        base = super().__str__()
        if not self.issues:
            return base
        return f"{base}: " + "; ".join(self.issues)


class ConfigurationError(ValidationError):
    pass


class InputError(ValidationError):
    pass


class SplitError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message: str, raw_reply: str):
        super().__init__(message)
        self.raw_reply = raw_reply


class RuntimeFailure(EmcotError, RuntimeError):
    exit_code = 2


class ExpertRefusal(RuntimeFailure):
    pass


class AnnotatorTimeout(RuntimeFailure):
    pass


class CodecFitError(RuntimeFailure):
    def __init__(self, message: str, loss_curve: list[float]):
        super().__init__(message)
        self.loss_curve = list(loss_curve)


class SamplingError(RuntimeFailure):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (шаг {step})")
        self.step = step


class NonFiniteLossError(RuntimeFailure):
    def __init__(self, component: str, step: int):
        super().__init__(f"Нечисловое значение компоненты потерь '{component}' на шаге {step}")
        self.component = component
        self.step = step


class DivergenceError(RuntimeFailure):
    pass
