import base64
import io
import json
from collections import namedtuple
from dataclasses import InitVar, dataclass
from pathlib import Path
from typing import Any, ClassVar, Iterable, Iterator

import numpy as np
import pandas as pd
from openpyxl.styles import Font, numbers
from openpyxl.utils import get_column_letter
from openpyxl.utils.dataframe import dataframe_to_rows
from openpyxl.workbook import Workbook
from openpyxl.worksheet.dimensions import ColumnDimension
from openpyxl.worksheet.table import Table, TableStyleInfo
from PIL import Image

from emcot_vla import __version__
from emcot_vla.config.configurations import Config, RunConfig, config_hash

DEFAULT_SAVE_PATH = Path("saved")


def dumps_line(row: dict[str, Any]) -> str:
    """
    Каноническая JSON-строка: отсортированные ключи, без пробелов.
    """
    return json.dumps(row, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path: Path | str, rows: Iterable[dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(dumps_line(row) + "\n")
    return path


def read_jsonl(path: Path | str) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield json.loads(line)


def write_json(path: Path | str, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, sort_keys=True, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


def read_json(path: Path | str) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def artifact_stamp(config: RunConfig) -> dict[str, str]:
    """
    Метаданные, которые встраиваются в каждый артефакт.
    """
    return {"config_hash": config_hash(config), "tool_version": __version__}


def encode_png(image: np.ndarray) -> str:
    """
    Кодирование RGB-изображения (uint8, H×W×3) в base64-строку PNG.
    """
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(
        buffer, format="PNG", optimize=False
    )
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data))) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


@dataclass
class Writer:
    destination_path: ClassVar[Path] = DEFAULT_SAVE_PATH

    input_config: InitVar[Config]
    config: namedtuple = None
    output_dir: Path | None = None

    def __post_init__(self, input_config: Config):
        if self.output_dir is None:
            self.output_dir = self.destination_path
        self.output_dir = Path(self.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

        self.config = input_config.parameters

    def columns_best_fit(self, ws) -> None:
        """
        Make all columns best fit
        """
        column_letters = tuple(
            get_column_letter(col_number) for col_number in range(1, ws.max_column + 1)
        )
        for column_letter in column_letters:
            dim = ColumnDimension(ws, index=column_letter, bestFit=True, customWidth=True)
            ws.column_dimensions[column_letter] = dim

    def export_to_xls(self, df: pd.DataFrame, fname: str | None = None) -> Path:
        """
        Экспорт таблицы долей успеха в Excel.

        Последняя строка таблицы содержит среднее по каждому числовому столбцу,
        начиная со столбца ``start_summation_row``.

        Parameters
        ----------
        df : pd.DataFrame
            Таблица: первый столбец — подписи строк, остальные — доли в [0, 1].
        fname : str
            Имя файла. Если не задано, будет сформировано автоматически.

        Returns
        -------
        Path
            Путь к сохранённой книге.
        """
        x, y = df.shape
        right_bound = get_column_letter(y)

        wb = Workbook()
        ws = wb.active
        ws.title = f"{self.config.category}"[:31]
        ws.sheet_view.showGridLines = False

        # Заголовок и пустая строка
        ws["A1"].value = f"{self.config.report_name} - {self.config.run_label}"
        ws["A1"].style = f"{self.config.table_header_style}"
        ws["A2"] = ""

        for row in dataframe_to_rows(df, header=True, index=False):
            ws.append([None if isinstance(v, float) and np.isnan(v) else v for v in row])

        tab = Table(
            displayName=f"{self.config.table_display_name}",
            ref=f"A3:{right_bound}{x + 4}",
            totalsRowShown=True,
        )
        style = TableStyleInfo(
            name=f"{self.config.excel_table_style_name}",
            showFirstColumn=True,
            showLastColumn=False,
            showRowStripes=True,
            showColumnStripes=True,
        )
        tab.tableStyleInfo = style
        ws.add_table(tab)

        # Доли успеха в процентном формате
        for col in ws.iter_cols(min_col=2, max_col=y, min_row=4, max_row=x + 4):
            for cell in col:
                cell.number_format = numbers.FORMAT_PERCENTAGE_00

        summation_row = ws[
            f"{self.config.start_summation_row}{x + 4}" : f"{right_bound}{x + 4}"
        ]
        for cell in summation_row[0]:
            cell.value = f"=AVERAGE({cell.column_letter}4:{cell.column_letter}{cell.row - 1})"
            cell.font = Font(bold=True)

        ws[f"A{x + 4}"] = "Среднее"
        ws[f"A{x + 4}"].font = Font(bold=True)

        self.columns_best_fit(ws)

        if fname is None:
            fname = f"{self.config.category}_{self.config.run_label}.xlsx"
        path = self.output_dir.joinpath(fname)
        wb.save(path)
        return path
