"""
Точка входа командной строки.

Подкоманды: synth-env-data, annotate, build-dataset, pretrain, finetune,
rollout, evaluate, ablate, inspect-mask. Коды выхода: 0 — успех,
1 — ошибка валидации, 2 — ошибка выполнения; текст ошибки пишется в stderr
одной строкой JSON.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
from loguru import logger

from emcot_vla import __version__
from emcot_vla.config.configurations import LEVELS, MODES, TASK_IDS, RunConfig, load_config
from emcot_vla.envsim.collect import collect_dataset, load_dataset, save_dataset
from emcot_vla.envsim.tasks import make_task
from emcot_vla.inference.evaluate import (
    EMCOT_ROWS,
    RECIPE_MIXTURES,
    RECIPE_ROWS,
    ablation_suite,
    dump_episode_grid,
    evaluate,
    write_reports,
)
from emcot_vla.inference.rollout import EMCoTPolicy, run_episode
from emcot_vla.model.checkpoint import load_checkpoint
from emcot_vla.model.codec import LatentCodec, encode_latents, fit_latent_codec, load_codec, save_codec
from emcot_vla.model.mot import MoTPolicy
from emcot_vla.processing.annotator import annotate_dataset, read_records, write_records
from emcot_vla.processing.primitives import extract_primitives, write_labels
from emcot_vla.processing.vqa import generate_vqa, read_vqa, write_vqa
from emcot_vla.tokenstream.assemble import SequenceBuilder
from emcot_vla.tokenstream.mask import build_attention_mask, demo_emcot_records, demo_pretrain_records, inspect_mask
from emcot_vla.tokenstream.vocab import Vocabulary
from emcot_vla.training.corpus import TrainingCorpus
from emcot_vla.training.trainer import run_stage
from emcot_vla.utils.errors import ConfigurationError, EmcotError, InputError
from emcot_vla.utils.io import artifact_stamp, read_json, write_json

MANIFEST = "manifest.json"
LOG_LEVELS = ("TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL")


class CliParser(argparse.ArgumentParser):
    """
    Ошибки разбора аргументов превращаются в ``ConfigurationError`` (код выхода 1).
    """

    def error(self, message: str):
        raise ConfigurationError(f"{message}\n{self.format_usage().strip()}")


def _csv(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def build_parser() -> CliParser:
    parser = CliParser(prog="emcot-vla", description="Политика VLA с воплощённой цепочкой рассуждений")
    parser.add_argument("--config", type=Path, default=None, help="YAML-файл конфигурации")
    parser.add_argument("--log-level", type=str.upper, choices=LOG_LEVELS, default="INFO", help="Уровень журнала")
    parser.add_argument("--workers", type=int, default=1, help="Число параллельных процессов/запросов")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("synth-env-data", help="Сбор экспертных траекторий и VQA")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tasks", type=_csv, default=list(TASK_IDS))
    p.add_argument("--levels", type=_csv, default=["easy"])
    p.add_argument("--seeds", type=int, default=40, help="Число зёрен на задачу и уровень")
    p.add_argument("--seed-start", type=int, default=0)
    p.add_argument("--vqa-per-scene", type=int, default=2)

    p = sub.add_parser("annotate", help="Примитивы и аннотации EM-CoT")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("build-dataset", help="Обучение кодека и манифест набора")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--skip-codec", action="store_true")

    for name in ("pretrain", "finetune"):
        p = sub.add_parser(name, help=f"Стадия {name}")
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--init", type=Path, default=None, help="Контрольная точка для начальных весов")
        p.add_argument("--resume", type=Path, default=None)
        p.add_argument("--steps", type=int, default=None)
        if name == "pretrain":
            p.add_argument("--recipe", choices=[k for k in RECIPE_MIXTURES if RECIPE_MIXTURES[k]], default="full")
        else:
            p.add_argument("--mode", choices=MODES, default=None)

    p = sub.add_parser("rollout", help="Один эпизод в среде")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--task", choices=TASK_IDS, default="stack_two")
    p.add_argument("--level", choices=LEVELS, default="easy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--grid", type=Path, default=None, help="PNG-сетка подцелей и кадров")

    p = sub.add_parser("evaluate", help="Оценка на наборе задач")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--out", type=Path, default=Path("saved"))
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--levels", type=_csv, default=None)
    p.add_argument("--tasks", type=_csv, default=None)
    p.add_argument("--mode", choices=MODES, default=None)

    p = sub.add_parser("ablate", help="Таблица абляций")
    p.add_argument("--kind", choices=("emcot", "recipe"), default="emcot")
    p.add_argument("--checkpoints", type=_csv, default=[], help="вариант=путь,...")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--out", type=Path, default=Path("saved"))
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--levels", type=_csv, default=None)

    p = sub.add_parser("inspect-mask", help="Выгрузка маски внимания")
    p.add_argument("--demo", choices=("emcot", "pretrain"), default="emcot")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", choices=("pgm", "csv"), default=None)
    return parser


def split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """
    Отделение точечных переопределений ``--секция.ключ=значение`` от остальных аргументов.
    """
    overrides, rest = [], []
    for item in argv:
        head = item.split("=", 1)[0]
        if item.startswith("--") and "=" in item and "." in head:
            overrides.append(item[2:])
        else:
            rest.append(item)
    return overrides, rest


# данные


def _manifest(data: Path) -> dict[str, Any]:
    path = data / MANIFEST
    if not path.exists():
        raise InputError(f"Нет манифеста набора: {path}")
    return read_json(path)


def _check_hash(manifest: dict[str, Any], config: RunConfig) -> None:
    stamp = artifact_stamp(config)
    if manifest.get("config_hash") != stamp["config_hash"]:
        logger.warning("Хеш конфигурации набора отличается от текущего: {}", manifest.get("config_hash", "")[:8])


def cmd_synth(args, config: RunConfig) -> dict[str, Any]:
    seeds = list(range(args.seed_start, args.seed_start + args.seeds))
    trajectories, stats = collect_dataset(args.tasks, seeds, args.levels, config.env, args.workers)
    stamp = artifact_stamp(config)
    paths = save_dataset(trajectories, args.out / "trajectories", stamp, config.env.image_format)
    vqa = generate_vqa(args.tasks, seeds, args.levels, config.env, args.vqa_per_scene)
    vqa_path = write_vqa(args.out / "vqa.jsonl", vqa, stamp)
    manifest = {
        **stamp,
        "kind": "manifest",
        "trajectories": [str(p.relative_to(args.out)) for p in paths],
        "vqa": str(vqa_path.relative_to(args.out)),
        "collection": stats,
    }
    write_json(args.out / MANIFEST, manifest)
    return {"trajectories": len(paths), "vqa": len(vqa), **stats}


def _trajectories(data: Path, manifest: dict[str, Any]):
    return load_dataset(data / p for p in manifest["trajectories"])


def cmd_annotate(args, config: RunConfig) -> dict[str, Any]:
    manifest = _manifest(args.data)
    _check_hash(manifest, config)
    trajectories = _trajectories(args.data, manifest)
    stamp = artifact_stamp(config)
    tables = [extract_primitives(t.proprio, config.thresholds, t.trajectory_id) for t in trajectories]
    labels = write_labels(args.data / "labels.jsonl", tables, stamp)
    records = annotate_dataset(trajectories, config, args.workers)
    records_path = write_records(args.data / "records.jsonl", records, stamp)
    manifest.update(labels=str(labels.relative_to(args.data)), records=str(records_path.relative_to(args.data)))
    write_json(args.data / MANIFEST, manifest)
    fallbacks = sum(1 for r in records if r.provenance["fallbacks"])
    return {"records": len(records), "fallbacks": fallbacks}


def cmd_build(args, config: RunConfig) -> dict[str, Any]:
    manifest = _manifest(args.data)
    _check_hash(manifest, config)
    missing = [key for key in ("trajectories", "vqa", "labels", "records") if key not in manifest]
    if missing:
        raise InputError(f"В манифесте нет разделов {missing}: выполните synth-env-data и annotate")
    for rel in [*manifest["trajectories"], manifest["vqa"], manifest["labels"], manifest["records"]]:
        if not (args.data / rel).exists():
            raise InputError(f"Отсутствует файл набора: {rel}")
    result: dict[str, Any] = {"trajectories": len(manifest["trajectories"])}
    if not args.skip_codec:
        trajectories = _trajectories(args.data, manifest)
        images = np.concatenate([t.images for t in trajectories])
        codec, report = fit_latent_codec(images, config.model)
        save_codec(args.data / "codec.pt", codec, report)
        manifest["codec"] = "codec.pt"
        manifest["codec_report"] = {k: v for k, v in report.items() if k != "loss_curve"}
        result.update(manifest["codec_report"])
    manifest.update(artifact_stamp(config))
    write_json(args.data / MANIFEST, manifest)
    return result


# модель


def _codec(data: Path | None, config: RunConfig) -> LatentCodec:
    if data is not None:
        manifest = _manifest(data)
        if "codec" in manifest:
            return load_codec(data / manifest["codec"], config.model)
    logger.warning("Кодек не найден, используется необученный")
    torch.manual_seed(config.model.seed)
    return LatentCodec(config.model).freeze()


def _policy(checkpoint: Path | None, data: Path | None, config: RunConfig) -> EMCoTPolicy:
    if checkpoint is None:
        logger.info("Контрольная точка не задана: оценивается необученная модель")
        torch.manual_seed(config.model.seed)
        return EMCoTPolicy(MoTPolicy(config.model), _codec(data, config), config)
    model, codec, payload = load_checkpoint(checkpoint, config)
    mode = payload["regime"].partition("/")[2]
    if mode and mode != config.rollout.mode:
        logger.warning("Режим исполнения {} отличается от режима обучения {}", config.rollout.mode, mode)
    return EMCoTPolicy(model, codec or _codec(data, config), config)


def _corpus(data: Path, config: RunConfig, codec: LatentCodec, stage: str, mode: str) -> TrainingCorpus:
    manifest = _manifest(data)
    _check_hash(manifest, config)
    builder = SequenceBuilder(
        Vocabulary(), lambda image: encode_latents(codec, image), config.model, config.tokens, config.env
    )
    records = read_records(data / manifest["records"]) if stage == "finetune" and "records" in manifest else []
    return TrainingCorpus(
        builder,
        trajectories=_trajectories(data, manifest),
        records=records,
        vqa=read_vqa(data / manifest["vqa"]),
        emcot_mode=mode,
        seed=getattr(config, stage).seed,
    )


def cmd_train(args, config: RunConfig) -> dict[str, Any]:
    stage = args.command
    if stage == "pretrain":
        config = replace(config, pretrain=replace(config.pretrain, mixture=dict(RECIPE_MIXTURES[args.recipe])))
        mode = config.pretrain.emcot_mode
    else:
        mode = args.mode or config.finetune.emcot_mode
        config = replace(config, finetune=replace(config.finetune, emcot_mode=mode))

    codec = _codec(args.data, config)
    torch.manual_seed(config.model.seed)
    model = MoTPolicy(config.model)
    if args.init is not None:
        model, saved_codec, _ = load_checkpoint(args.init, config)
        codec = saved_codec or codec
    corpus = _corpus(args.data, config, codec, stage, mode)
    report, final = run_stage(model, config, stage, corpus, args.out, codec, args.resume, args.steps)
    return {"steps": report.steps, "final_loss": report.losses[-1]["total"] if report.losses else None, "checkpoint": str(final)}


def _apply_eval_args(args, config: RunConfig) -> RunConfig:
    changes = {}
    if getattr(args, "episodes", None):
        changes["episodes"] = args.episodes
    if getattr(args, "levels", None):
        changes["levels"] = tuple(args.levels)
    if getattr(args, "tasks", None):
        changes["tasks"] = tuple(args.tasks)
    rollout = config.rollout
    if getattr(args, "mode", None):
        rollout = replace(rollout, mode=args.mode)
    return replace(config, eval=replace(config.eval, **changes), rollout=rollout)


def cmd_rollout(args, config: RunConfig) -> dict[str, Any]:
    config = _apply_eval_args(args, config)
    policy = _policy(args.checkpoint, args.data, config)
    record = run_episode(policy, make_task(args.task, args.level), args.seed, config.env, config.rollout, keep_frames=bool(args.grid))
    if args.grid is not None:
        dump_episode_grid(record, args.grid)
    return record.to_dict()


def cmd_evaluate(args, config: RunConfig) -> dict[str, Any]:
    config = _apply_eval_args(args, config)
    policy = _policy(args.checkpoint, args.data, config)
    report = evaluate(policy, config)
    table = report.table()
    paths = write_reports(report.to_dict(), table, args.out, config, "evaluation")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return {"mean": report.mean_rates(), **{k: str(v) for k, v in paths.items()}}


def cmd_ablate(args, config: RunConfig) -> dict[str, Any]:
    config = _apply_eval_args(args, config)
    rows = EMCOT_ROWS if args.kind == "emcot" else RECIPE_ROWS
    given = {}
    for item in args.checkpoints:
        key, _, path = item.partition("=")
        if key not in rows or not path:
            raise ConfigurationError(f"Ожидалось вариант=путь с вариантом из {list(rows)}: {item}")
        given[key] = Path(path)

    def factory(path: Path) -> Callable[[], EMCoTPolicy]:
        return lambda: _policy(path, args.data, config)

    policies = {key: factory(path) for key, path in given.items()}
    table, reports = ablation_suite(policies, config, args.kind)
    report_dict = {
        "kind": args.kind,
        "checkpoints": {k: str(v) for k, v in given.items()},
        "rows": {k: (r.to_dict() if r is not None else None) for k, r in reports.items()},
    }
    paths = write_reports(report_dict, table, args.out, config, f"ablation-{args.kind}", ablation=True)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return {k: str(v) for k, v in paths.items()}


def cmd_inspect_mask(args, config: RunConfig) -> dict[str, Any]:
    records = demo_emcot_records() if args.demo == "emcot" else demo_pretrain_records()
    mask = build_attention_mask(records, config.tokens.isolate_noise_groups)
    path = inspect_mask(mask, args.out, args.format)
    return {"path": str(path), "size": len(records), "allowed": int(mask.sum())}


COMMANDS: dict[str, Callable] = {
    "synth-env-data": cmd_synth,
    "annotate": cmd_annotate,
    "build-dataset": cmd_build,
    "pretrain": cmd_train,
    "finetune": cmd_train,
    "rollout": cmd_rollout,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "inspect-mask": cmd_inspect_mask,
}


def _report_error(exc: BaseException, exit_code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": exit_code}
    print(json.dumps(payload, ensure_ascii=False), file=sys.stderr)
    return exit_code


def main(argv: list[str] | None = None) -> int:
    """
    Запуск подкоманды; возвращает код выхода.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        overrides, rest = split_overrides(argv)
        args = build_parser().parse_args(rest)
        logger.remove()
        logger.add(sys.stderr, level=args.log_level)
        config = load_config(args.config, overrides)
        result = COMMANDS[args.command](args, config)
        logger.info("{}: {}", args.command, json.dumps(result, ensure_ascii=False, default=str))
        return 0
    except EmcotError as exc:
        return _report_error(exc, exc.exit_code)
    except Exception as exc:  # noqa: BLE001
        logger.exception("Необработанная ошибка")
        return _report_error(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
