import hashlib
import json
import os
from collections import namedtuple
from dataclasses import InitVar, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from emcot_vla import __version__
from emcot_vla.utils.errors import ConfigurationError

TASK_IDS = ("stack_two", "handover_block", "place_a2b", "press_button", "sweep_to_zone")
LEVELS = ("easy", "hard")
MODES = ("full", "no_text", "no_vis", "none")


@dataclass
class EnvConfig:
    """
    Параметры настольной среды с двумя манипуляторами.

    Parameters
    ----------
    table_size : float
        Сторона квадратного стола в условных клетках.
    z_max : float
        Максимальная высота схвата.
    image_size : int
        Сторона RGB-наблюдения в пикселях.
    step_limit : int
        Предельное число шагов эпизода.
    grasp_radius : float
        Радиус захвата объекта схватом.
    max_speed : float
        Максимальная евклидова длина смещения схвата за кадр.
    carry_height : float
        Высота переноса объектов в сценарии эксперта.
    push_height : float
        Ниже этой высоты пустой открытый схват толкает объекты.
    push_radius : float
        Радиус толкающего контакта.
    hold_frames : int
        Длина паузы эксперта между фазами движения (не меньше θ_min_idle).
    min_waypoint_distance : float
        Более короткие перемещения эксперт пропускает.
    max_distractors : int
        Максимум отвлекающих объектов на уровне hard.
    background_shift : float
        Максимальный сдвиг цвета фона на уровне hard (в единицах 0..255).
    pose_jitter : float
        Амплитуда шума начальных поз на уровне hard.
    image_format : str
        ``png`` (base64 в строке кадра) или ``blob`` (соседний бинарный файл).
    """

    table_size: float = 16.0
    z_max: float = 4.0
    image_size: int = 64
    step_limit: int = 200
    grasp_radius: float = 1.5
    max_speed: float = 0.5
    carry_height: float = 3.0
    push_height: float = 1.0
    push_radius: float = 1.0
    hold_frames: int = 4
    min_waypoint_distance: float = 0.25
    max_distractors: int = 3
    background_shift: float = 40.0
    pose_jitter: float = 0.5
    image_format: str = "png"

    def __post_init__(self):
        if self.image_format not in ("png", "blob"):
            raise ConfigurationError(f"Неизвестный формат изображений: {self.image_format}")
        if self.step_limit < 1 or self.max_speed <= 0 or self.grasp_radius <= 0:
            raise ConfigurationError("Параметры среды должны быть положительными")


@dataclass
class Thresholds:
    """
    Пороги извлечения примитивов.

    Parameters
    ----------
    theta_vel : float
        Максимальное смещение за кадр, при котором рука считается неподвижной.
    theta_dg : float
        Минимальное значимое изменение раскрытия схвата.
    theta_min_idle : int
        Минимальная длина паузы (в кадрах), разделяющей сегменты.
    theta_dir : float
        Доля от доминирующей оси, начиная с которой ось попадает в направление.
    literal_idle_subsegments : bool
        Размечать ``move`` по подотрезкам покоя внутри сегмента, а не по подотрезкам движения.
    """

    theta_vel: float = 0.1
    theta_dg: float = 0.2
    theta_min_idle: int = 3
    theta_dir: float = 0.7
    literal_idle_subsegments: bool = False

    def __post_init__(self):
        if min(self.theta_vel, self.theta_dg, self.theta_dir) <= 0:
            raise ConfigurationError("Пороги должны быть строго положительными")
        if int(self.theta_min_idle) != self.theta_min_idle or self.theta_min_idle < 1:
            raise ConfigurationError("theta_min_idle должен быть целым и не меньше 1")
        if self.theta_dir > 1:
            raise ConfigurationError("theta_dir не может превышать 1")


@dataclass
class AnnotatorConfig:
    """
    Параметры аннотатора.

    ``backend`` — ``template`` (детерминированные шаблоны) или ``external``
    (текстовый клиент внешней модели). ``subgoal_shift`` равен 0 (первый кадр
    следующей подзадачи) или -1 (последний кадр текущей). ``subgoal_keys``:
    ``occurrence`` даёт каждому вхождению подзадачи свою подцель, ``string``
    объединяет повторные вхождения одной строки.
    """

    backend: str = "template"
    endpoint: str = ""
    model_name: str = "annotator"
    api_key: str = ""
    timeout: float = 30.0
    max_retries: int = 2
    max_in_flight: int = 4
    max_reasoning_words: int = 50
    subgoal_shift: int = 0
    subgoal_keys: str = "occurrence"

    def __post_init__(self):
        if self.backend not in ("template", "external"):
            raise ConfigurationError(f"Неизвестный бэкенд аннотатора: {self.backend}")
        if self.subgoal_shift not in (0, -1):
            raise ConfigurationError("subgoal_shift принимает значения 0 или -1")
        if self.subgoal_keys not in ("occurrence", "string"):
            raise ConfigurationError("subgoal_keys принимает значения occurrence или string")
        self.endpoint = os.environ.get("EMCOT_ANNOTATOR_ENDPOINT", self.endpoint)
        self.api_key = os.environ.get("EMCOT_ANNOTATOR_API_KEY", self.api_key)


@dataclass
class TokenConfig:
    """
    Параметры сборки последовательностей.

    ``vg_context`` (k) и ``vg_horizon`` (h) задают задачу предсказания будущего кадра,
    ``isolate_noise_groups`` запрещает внимание между разными шумовыми группами.
    """

    vg_context: int = 2
    vg_horizon: int = 4
    max_len: int = 2048
    isolate_noise_groups: bool = True

    def __post_init__(self):
        if self.vg_context < 1 or self.vg_horizon < 1 or self.max_len < 1:
            raise ConfigurationError("Параметры последовательностей должны быть положительными")


@dataclass
class ModelConfig:
    """
    Размерности модели смеси трансформеров.

    Parameters
    ----------
    d_model : int
        Ширина скрытого состояния; равна ``n_heads * head_dim``.
    n_layers, n_heads, head_dim : int
        Глубина и устройство внимания (у каждого эксперта свои проекции).
    vocab_size : int
        Размер словаря (не более 512).
    image_size, patch_size : int
        Разрешение наблюдения и размер патча семантической ветви.
    latent_grid, latent_channels : int
        Сетка латентов кодека g×g и число каналов.
    action_dim, chunk, context_frames, flow_steps : int
        Размер действия, длина чанка K, число кадров контекста c, шаги потока N.
    """

    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 32
    ffn_mult: int = 4
    vocab_size: int = 512
    image_size: int = 64
    patch_size: int = 8
    latent_grid: int = 8
    latent_channels: int = 8
    codec_downsample: int = 8
    action_dim: int = 8
    chunk: int = 16
    context_frames: int = 3
    flow_steps: int = 10
    rope_base: float = 10000.0
    codec_mse_threshold: float = 3e-3
    codec_psnr_floor: float = 25.0
    codec_steps: int = 3000
    codec_lr: float = 2e-3
    codec_batch: int = 64
    codec_min_images: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigurationError("d_model должен равняться n_heads * head_dim")
        if self.head_dim % 2:
            raise ConfigurationError("head_dim должен быть чётным для поворотных позиций")
        if self.image_size % self.codec_downsample or (
            self.image_size // self.codec_downsample != self.latent_grid
        ):
            raise ConfigurationError("Сетка латентов не согласована с разрешением и кодеком")
        if self.image_size % self.patch_size:
            raise ConfigurationError("patch_size должен делить image_size")
        if self.vocab_size > 512:
            raise ConfigurationError("Словарь не может превышать 512 токенов")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_latents(self) -> int:
        return self.latent_grid**2


PRETRAIN_MIXTURE = {"vqa": 1.0, "vg": 1.0, "ap": 2.0}
FINETUNE_MIXTURE = {"emcot": 4.0, "vqa": 1.0}


@dataclass
class StageConfig:
    """
    Параметры стадии обучения.

    Значения ``None`` заменяются умолчаниями стадии: веса потерь
    CE:MSE:L1 = 0.25:0.5:1.0 для предобучения и 1:1:1 для дообучения,
    скорость обучения 1e-4 и 5e-5 соответственно.
    """

    stage: str = "pretrain"
    lr: float | None = None
    warmup_steps: int | None = None
    total_steps: int = 2000
    loss_weights: tuple[float, float, float] | None = None
    mixture: dict[str, float] | None = None
    batch_size: int = 16
    grad_accum: int = 1
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    emcot_mode: str = "full"
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigurationError(f"Неизвестная стадия: {self.stage}")
        pretrain = self.stage == "pretrain"
        if self.lr is None:
            self.lr = 1e-4 if pretrain else 5e-5
        if self.warmup_steps is None:
            self.warmup_steps = 50 if pretrain else 10
        if self.loss_weights is None:
            self.loss_weights = (0.25, 0.5, 1.0) if pretrain else (1.0, 1.0, 1.0)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if len(self.loss_weights) != 3 or min(self.loss_weights) <= 0:
            raise ConfigurationError("Нужны три строго положительных веса потерь")
        default_mixture = PRETRAIN_MIXTURE if pretrain else FINETUNE_MIXTURE
        if self.mixture is None:
            self.mixture = dict(default_mixture)
        unknown = set(self.mixture) - set(default_mixture)
        if unknown:
            raise ConfigurationError(f"Неизвестные источники смеси: {sorted(unknown)}")
        if min(self.mixture.values()) < 0 or sum(self.mixture.values()) <= 0:
            raise ConfigurationError("Доли смеси неотрицательны и не все нулевые")
        if self.emcot_mode not in MODES:
            raise ConfigurationError(f"Неизвестный режим EM-CoT: {self.emcot_mode}")
        if self.batch_size < 1 or self.grad_accum < 1 or self.total_steps < 1:
            raise ConfigurationError("Размер батча и число шагов должны быть положительными")


@dataclass
class RolloutConfig:
    """
    Параметры замкнутого исполнения политики.

    ``replan_trigger``: ``chunk`` — перегенерация рассуждения и подцели каждые
    ``replan_every`` чанков; ``subgoal`` — только после достижения подцели.
    """

    mode: str = "full"
    context: int = 3
    chunk: int = 16
    replan_every: int = 1
    replan_trigger: str = "chunk"
    flow_steps: int = 10
    max_text_tokens: int = 160
    min_text_tokens: int = 1
    step_limit: int = 200
    temperature: float = 0.0
    subgoal_tolerance: float = 0.05

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"Неизвестный режим: {self.mode}")
        if self.replan_every < 1:
            raise ConfigurationError("replan_every должен быть не меньше 1")
        if self.replan_trigger not in ("chunk", "subgoal"):
            raise ConfigurationError(f"Неизвестный триггер перепланирования: {self.replan_trigger}")
        if self.context < 1 or self.chunk < 1 or self.flow_steps < 1:
            raise ConfigurationError("context, chunk и flow_steps должны быть положительными")


@dataclass
class EvalConfig:
    episodes: int = 20
    levels: tuple[str, ...] = LEVELS
    tasks: tuple[str, ...] = TASK_IDS
    base_seed: int = 1000

    def __post_init__(self):
        self.levels = tuple(self.levels)
        self.tasks = tuple(self.tasks)
        if self.episodes < 1 or not self.tasks:
            raise ConfigurationError("Нужна хотя бы одна задача и один эпизод")
        bad = [lvl for lvl in self.levels if lvl not in LEVELS]
        if bad or not self.levels:
            raise ConfigurationError(f"Неизвестные уровни: {bad}")


SECTIONS = {
    "env": EnvConfig,
    "thresholds": Thresholds,
    "annotator": AnnotatorConfig,
    "tokens": TokenConfig,
    "model": ModelConfig,
    "pretrain": StageConfig,
    "finetune": StageConfig,
    "rollout": RolloutConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    annotator: AnnotatorConfig = field(default_factory=AnnotatorConfig)
    tokens: TokenConfig = field(default_factory=TokenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: StageConfig = field(default_factory=lambda: StageConfig(stage="pretrain"))
    finetune: StageConfig = field(default_factory=lambda: StageConfig(stage="finetune"))
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.env.hold_frames < self.thresholds.theta_min_idle:
            raise ConfigurationError("env.hold_frames должен быть не меньше theta_min_idle")
        if self.rollout.chunk != self.model.chunk or self.rollout.context != self.model.context_frames:
            raise ConfigurationError("rollout.chunk/context должны совпадать с model.chunk/context_frames")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        # api_key не должен попадать в артефакты
        data["annotator"].pop("api_key", None)
        return data


def _build_section(name: str, values: dict[str, Any]):
    cls = SECTIONS[name]
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"Неизвестные ключи в секции '{name}': {sorted(unknown)}")
    if name in ("pretrain", "finetune"):
        values = {**values, "stage": name}
    return cls(**values)


def config_from_dict(data: dict[str, Any] | None) -> RunConfig:
    """
    Сборка конфигурации из дерева ключ/значение.

    Parameters
    ----------
    data : dict | None
        Секции верхнего уровня; отсутствующие секции берутся по умолчанию.

    Returns
    -------
    RunConfig
        Проверенная конфигурация.
    """
    data = dict(data or {})
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"Неизвестные секции конфигурации: {sorted(unknown)}")
    sections = {name: _build_section(name, dict(values or {})) for name, values in data.items()}
    return RunConfig(**sections)


def load_config(path: Path | str | None = None, overrides: list[str] | None = None) -> RunConfig:
    """
    Чтение YAML-файла конфигурации с последующим применением точечных переопределений.
    """
    data: dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigurationError("Файл конфигурации должен содержать словарь секций")
    for item in overrides or []:
        _apply_override(data, item)
    return config_from_dict(data)


def _apply_override(data: dict[str, Any], item: str) -> None:
    if "=" not in item:
        raise ConfigurationError(f"Переопределение должно иметь вид секция.ключ=значение: {item}")
    dotted, raw = item.split("=", 1)
    keys = dotted.lstrip("-").split(".")
    if len(keys) < 2:
        raise ConfigurationError(f"Ожидался путь вида секция.ключ: {dotted}")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"Ключ {dotted} не является секцией")
    node[keys[-1]] = yaml.safe_load(raw)


def config_hash(config: RunConfig) -> str:
    """
    SHA-256 канонического JSON-представления конфигурации (с версией пакета).
    """
    payload = json.dumps(
        {"config": config.to_dict(), "version": __version__}, sort_keys=True, default=list
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class ReportStyle:
    """
    Оформление таблицы отчёта в Excel.

    Parameters
    ----------
    report_name : str
        Название отчёта в заголовке страницы.
    table_display_name : str
        Название таблицы, как оно отображается на странице Excel.
    excel_table_style_name : str
        Название встроенного стиля таблицы в Excel.
    start_summation_row : str
        Буква столбца, с которого начинаются ячейки итоговой строки.
    table_header_style : str
        Название стиля ячейки заголовка. По умолчанию "Headline 1".
    """

    report_name: str
    table_display_name: str
    excel_table_style_name: str
    start_summation_row: str
    table_header_style: str = "Headline 1"


@dataclass
class ReportConfig:
    """
    Параметры формирования отчета

    Parameters
    ----------
    run_label : str
        Метка прогона для заголовка страницы (обычно префикс хеша конфигурации).
    category : str
        Название листа книги Excel.
    """

    run_label: str
    category: str


@dataclass(slots=True)
class Config:
    report_style: InitVar[ReportStyle]
    report_config: InitVar[ReportConfig]
    parameters: namedtuple = None

    def __post_init__(self, report_style: ReportStyle, report_config: ReportConfig):
        """
        Формирует параметры оформления в виде именованного кортежа.
        """
        ReturnTuple = namedtuple(
            "ReturnTuple",
            list((asdict(report_style) | asdict(report_config)).keys()),
        )
        self.parameters = ReturnTuple(**(asdict(report_style) | asdict(report_config)))


evaluation_report_style = ReportStyle(
    report_name="Успешность эпизодов",
    table_display_name="Evaluation",
    excel_table_style_name="TableStyleLight9",
    start_summation_row="B",
)

ablation_report_style = ReportStyle(
    report_name="Абляция",
    table_display_name="Ablation",
    excel_table_style_name="TableStyleLight10",
    start_summation_row="B",
)
