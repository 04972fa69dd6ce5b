#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
実験結果の出力
results.csv / curves.csv / bound.json / projection.csv / timing.csv と
戦略 × 予算比率ごとのサマリー Excel ブックを書き出す
"""

from __future__ import annotations

import json
import logging
import os
from typing import Dict, Sequence

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
RESULT_COLUMNS = [
    "strategy", "seed", "budget_fraction", "budget", "avg_class_accuracy", "jsd_selected_vs_target",
    "reward", "mmd", "discovered_classes", "selected_indices",
]
SUMMARY_KEYS = ["strategy", "budget_fraction"]
SUMMARY_METRICS = ["avg_class_accuracy", "jsd_selected_vs_target", "discovered_classes", "reward"]


def _write_csv(frame: pd.DataFrame, path: str) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")


def _run_keys(r) -> Dict:
    return {"strategy": r.strategy, "seed": r.seed, "budget_fraction": r.budget_fraction, "budget": r.budget}


def results_frame(results: Sequence) -> pd.DataFrame:
    rows = []
    for r in results:
        rows.append({
            **_run_keys(r),
            "avg_class_accuracy": r.avg_class_accuracy,
            "jsd_selected_vs_target": r.jsd_selected_vs_target,
            "reward": r.reward,
            "mmd": r.mmd,
            "discovered_classes": r.discovered_classes,
            "selected_indices": " ".join(str(i) for i in r.selected_indices),
        })
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def projection_filename(r, sweep: bool) -> str:
    """実行ごとの射影CSV名（予算スイープ時は予算を付ける）"""
    suffix = f"_b{r.budget}" if sweep else ""
    return f"projection_{r.strategy}_{r.seed}{suffix}.csv"


def emit_report(results: Sequence, out_dir: str) -> Dict[str, str]:
    """
    実行結果一式をファイルに出力

    同じ入力からは同じバイト列が出力される（実行時間は timing.csv に分離）。
    projection.csv は results の先頭の実行（最初のシード・最初の予算・最初の戦略）の射影。
    全実行の射影は projection_{戦略}_{シード}.csv（予算スイープ時は _b{予算} 付き）に出力する。

    Args:
        results: RunResult の列
        out_dir: 出力ディレクトリ

    Returns:
        ファイル種別 → パス
    """
    if not results:
        raise ValueError("出力する結果がありません")
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "results": os.path.join(out_dir, "results.csv"),
        "curves": os.path.join(out_dir, "curves.csv"),
        "bound": os.path.join(out_dir, "bound.json"),
        "projection": os.path.join(out_dir, "projection.csv"),
        "timing": os.path.join(out_dir, "timing.csv"),
    }

    _write_csv(results_frame(results), paths["results"])

    curve_columns = ["strategy", "seed", "budget_fraction", "budget", "episode", "loss",
                     "mean_reward", "max_reward"]
    curve_rows = [
        {**_run_keys(r), "episode": c.episode, "loss": c.loss,
         "mean_reward": c.mean_reward, "max_reward": c.max_reward}
        for r in results for c in r.curves
    ]
    _write_csv(pd.DataFrame(curve_rows, columns=curve_columns), paths["curves"])

    bounds = [{**_run_keys(r), "estimate": True, **r.bound.to_dict()} for r in results]
    with open(paths["bound"], "w", encoding="utf-8") as f:
        json.dump(bounds, f, ensure_ascii=False, indent=2)

    first = results[0]
    _write_csv(first.projection, paths["projection"])
    logger.info("projection.csv は %s シード %d 予算 %d の射影", first.strategy, first.seed, first.budget)
    sweep = len({r.budget for r in results}) > 1
    for r in results:
        _write_csv(r.projection, os.path.join(out_dir, projection_filename(r, sweep)))

    timing = pd.DataFrame([{**_run_keys(r), "runtime_seconds": r.runtime} for r in results])
    _write_csv(timing, paths["timing"])
    logger.info("結果を出力: %s（%d 件）", out_dir, len(results))
    return paths


def summarize_results(frame: pd.DataFrame) -> pd.DataFrame:
    """戦略 × 予算比率ごとの平均・標準偏差"""
    frame = frame.copy()
    if "budget_fraction" not in frame:
        frame["budget_fraction"] = float("nan")
    groups = frame.groupby(SUMMARY_KEYS, sort=True, dropna=False)
    grouped = groups[SUMMARY_METRICS].agg(["mean", "std"])
    grouped.columns = [f"{metric}_{stat}" for metric, stat in grouped.columns]
    grouped.insert(0, "budget", groups["budget"].first())
    grouped.insert(1, "runs", groups.size())
    return grouped.reset_index()


def write_summary_workbook(summary: pd.DataFrame, path: str) -> None:
    """サマリーを Excel ブックに書き出す"""
    wb = Workbook()
    ws = wb.active
    ws.title = "summary"

    header_font = Font(bold=True, color="FFFFFF")
    header_fill = PatternFill("solid", fgColor="4F81BD")
    for col, name in enumerate(summary.columns, start=1):
        cell = ws.cell(row=1, column=col, value=name)
        cell.font = header_font
        cell.fill = header_fill
        cell.alignment = Alignment(horizontal="center")
        ws.column_dimensions[cell.column_letter].width = max(12, len(name) + 2)

    for row, record in enumerate(summary.itertuples(index=False), start=2):
        for col, value in enumerate(record, start=1):
            if isinstance(value, float):
                value = None if pd.isna(value) else round(value, 6)
            elif hasattr(value, "item"):
                value = value.item()
            ws.cell(row=row, column=col, value=value)

    ws.freeze_panes = "B2"
    wb.save(path)
    logger.info("サマリーブックを保存: %s", path)


def load_results(out_dir: str) -> pd.DataFrame:
    path = os.path.join(out_dir, "results.csv")
    return pd.read_csv(path, encoding="utf-8")
