"""
Coverage table rendering and CSV I/O for coverage reports.

The summary CSV has one row per (fmr, split, strategy) cell with columns
``fmr, split, strategy, mean, std, trials``; means and stds are fractions in
[0, 1]. The text table shows them as percentages with two decimals, one row
per FMR x split and one column per strategy (R / D / I / N, then M).
"""
import io
import logging
import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import pandas as pd
from pydantic import BaseModel

from src.data_models import STRATEGIES, STRATEGY_LABELS
from src.errors import ReportError
from src.utils import atomic_write_text

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
SUMMARY_COLUMNS = ["fmr", "split", "strategy", "mean", "std", "trials"]
CELL_WIDTH = 9


class CellSummary(BaseModel):
    fmr: float
    split: str
    strategy: str
    mean: Optional[float] = None
    std: Optional[float] = None
    trials: int = 0


def mean_std(values: Sequence[float]):
    """Exact-sum mean and population standard deviation; (None, None) when empty."""
    if not values:
        return None, None
    mean = math.fsum(values) / len(values)
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / len(values))
    return mean, std


def summarize(rows: Iterable, fmr_levels: Sequence[float], strategies: Sequence[str]) -> List[CellSummary]:
    """
    Aggregate trial rows (objects with fmr, strategy, status, train_coverage,
    test_coverage) into cells ordered by fmr, split, strategy.
    """
    rows = [r for r in rows if r.status == "ok"]
    cells = []
    for fmr in fmr_levels:
        for split in SPLITS:
            for strategy in strategies:
                values = [
                    getattr(r, f"{split}_coverage")
                    for r in rows
                    if r.fmr == fmr and r.strategy == strategy
                ]
                mean, std = mean_std(values)
                cells.append(CellSummary(fmr=fmr, split=split, strategy=strategy, mean=mean, std=std, trials=len(values)))
    return cells


def _cells_of(report_or_cells) -> List[CellSummary]:
    cells = getattr(report_or_cells, "cells", report_or_cells)
    return list(cells or [])


def _fmr_label(fmr: float) -> str:
    return f"{fmr * 100:g}"


def render_table(report_or_cells) -> str:
    """
    Fixed-width table: rows are FMR (percent) x split, columns are strategies.

    :param report_or_cells: a CoverageReport or a list of CellSummary
    """
    cells = _cells_of(report_or_cells)
    strategies = [s for s in STRATEGIES if any(c.strategy == s for c in cells)]
    strategies += sorted({c.strategy for c in cells} - set(strategies))
    if not cells or not strategies:
        raise ReportError("nothing to render")

    fmr_levels: List[float] = []
    for c in cells:
        if c.fmr not in fmr_levels:
            fmr_levels.append(c.fmr)
    lookup = {(c.fmr, c.split, c.strategy): c for c in cells}

    header = f"{'FMR(%)':<8}{'Split':<7}" + "".join(
        f"{STRATEGY_LABELS.get(s, s):>{CELL_WIDTH}}" for s in strategies
    )
    lines = [header, "-" * len(header)]
    for fmr in fmr_levels:
        for split in SPLITS:
            if not any((fmr, split, s) in lookup for s in strategies):
                continue
            row = f"{_fmr_label(fmr):<8}{split.capitalize():<7}"
            for s in strategies:
                cell = lookup.get((fmr, split, s))
                value = "n/a" if cell is None or cell.mean is None else f"{cell.mean * 100:.2f}"
                row += f"{value:>{CELL_WIDTH}}"
            lines.append(row)
    return "\n".join(lines) + "\n"


def _header_block(header_lines: Sequence[str]) -> str:
    return "".join(f"# {line}\n" for line in header_lines)


def render_csv(report_or_cells, header_lines: Sequence[str] = ()) -> str:
    cells = _cells_of(report_or_cells)
    if not cells:
        raise ReportError("nothing to render")
    frame = pd.DataFrame([c.model_dump() for c in cells], columns=SUMMARY_COLUMNS)
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, lineterminator="\n")
    return _header_block(header_lines) + buffer.getvalue()


def write_summary_csv(path: Union[str, Path], report_or_cells, header_lines: Sequence[str] = ()) -> Path:
    return atomic_write_text(path, render_csv(report_or_cells, header_lines))


def write_rows_csv(path: Union[str, Path], rows: Sequence[BaseModel], header_lines: Sequence[str] = ()) -> Path:
    """One CSV line per trial row (failure rows included)."""
    columns = list(type(rows[0]).model_fields) if rows else []
    frame = pd.DataFrame([r.model_dump() for r in rows], columns=columns)
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, lineterminator="\n")
    return atomic_write_text(path, _header_block(header_lines) + buffer.getvalue())


def read_summary_csv(path: Union[str, Path]) -> List[CellSummary]:
    """
    读取 report.csv（忽略 # 开头的头部信息）。

    :raises ReportError: unreadable file, missing columns, or no data rows
    """
    try:
        frame = pd.read_csv(path, comment="#", float_precision="round_trip", keep_default_na=True)
    except (OSError, ValueError, pd.errors.ParserError) as e:
        raise ReportError(f"cannot parse report {path}: {e}") from e
    missing = [c for c in SUMMARY_COLUMNS if c not in frame.columns]
    if missing:
        raise ReportError(f"report {path} is missing columns {missing}")
    if frame.empty:
        raise ReportError("nothing to render")
    cells = []
    try:
        for record in frame[SUMMARY_COLUMNS].to_dict(orient="records"):
            mean = None if pd.isna(record["mean"]) else float(record["mean"])
            std = None if pd.isna(record["std"]) else float(record["std"])
            cells.append(CellSummary(
                fmr=float(record["fmr"]),
                split=str(record["split"]),
                strategy=str(record["strategy"]),
                mean=mean,
                std=std,
                trials=int(record["trials"]),
            ))
    except (TypeError, ValueError) as e:
        raise ReportError(f"malformed row in {path}: {e}") from e
    bad_splits = {c.split for c in cells} - set(SPLITS)
    if bad_splits:
        raise ReportError(f"unknown split values {sorted(bad_splits)} in {path}")
    return cells
