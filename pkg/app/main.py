import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

# Загрузка переменных окружения из .env файла до чтения настроек
load_dotenv()

from app.exceptions import HsaError, ScenarioValidationError  # noqa: E402
from app.schemas import ScenarioConfig  # noqa: E402
from app.services.runner import execute, write_outputs  # noqa: E402
from app.services.scenarios import list_scenarios, scenario_document  # noqa: E402
from app.settings import settings  # noqa: E402

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def setup_logging() -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if settings.HSA_LOG_FILE:
        handlers.append(logging.FileHandler(settings.HSA_LOG_FILE, mode="a"))
    logging.basicConfig(
        level=getattr(logging, settings.HSA_LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


# ————————————————————————————————————————————————
def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: dict, overrides: list[str]) -> dict:
    """--set a.b.0.c=значение; числовые сегменты пути адресуют элементы списков."""
    for item in overrides:
        if "=" not in item:
            raise ScenarioValidationError(f"Переопределение должно иметь вид ключ=значение, получено: {item}")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = document
        try:
            for key in keys[:-1]:
                node = node[int(key)] if isinstance(node, list) else node.setdefault(key, {})
            last = keys[-1]
            if isinstance(node, list):
                node[int(last)] = _parse_value(raw)
            else:
                node[last] = _parse_value(raw)
        except (KeyError, IndexError, ValueError, TypeError) as e:
            raise ScenarioValidationError(f"Не удалось применить {item}: {e}") from e
        logger.debug(f"Переопределение {path} = {raw}")
    return document


def load_document(source: str) -> dict:
    path = Path(source)
    if path.is_file():
        try:
            with open(path, encoding="utf-8") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ScenarioValidationError(f"Не удалось прочитать {path}: {e}") from e
    return scenario_document(source)


def load_config(source: str, overrides: list[str] | None = None) -> ScenarioConfig:
    document = apply_overrides(load_document(source), overrides or [])
    try:
        return ScenarioConfig.model_validate(document)
    except ValidationError as e:
        raise ScenarioValidationError(str(e)) from e


# ————————————————————————————————————————————————
def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    directory = Path(args.out or cfg.output.directory)
    result = execute(cfg)
    write_outputs(result, directory, cfg.output.formats)
    print(json.dumps({"scenario": cfg.name, "files": [str(p) for p in result.files]}, ensure_ascii=False))
    return EXIT_OK


def cmd_scenarios(args) -> int:
    for item in list_scenarios():
        print(f"{item['name']:24s} {item['analysis']:18s} {item['description']}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.canonical:
        print(cfg.model_dump_json(indent=2))
    else:
        print(f"{cfg.name}: OK ({cfg.analysis.kind}, {len(cfg.ciders)} CIDER)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsa", description="Гармонический анализ устойчивости CIDER и сетей")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Выполнить сценарий (файл JSON или имя встроенного сценария)")
    run.add_argument("config")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    run.add_argument("--out", default=None)
    run.set_defaults(handler=cmd_run)

    scenarios = sub.add_parser("scenarios", help="Список встроенных сценариев")
    scenarios.set_defaults(handler=cmd_scenarios)

    validate = sub.add_parser("validate", help="Проверить сценарий без расчёта")
    validate.add_argument("config")
    validate.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    validate.add_argument("--canonical", action="store_true", help="Вывести сценарий в канонической форме")
    validate.set_defaults(handler=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ScenarioValidationError as e:
        logger.error(f"Ошибка валидации: {e}")
        print(f"Ошибка валидации: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (HsaError, np.linalg.LinAlgError, FloatingPointError) as e:
        logger.error(f"Численная ошибка ({type(e).__name__}): {e}")
        print(f"Численная ошибка ({type(e).__name__}): {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as e:
        # Необработанное исключение считаем численной ошибкой
        logger.exception(f"Необработанное исключение: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
