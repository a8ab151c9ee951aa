"""Report generation utilities for alignment and registration runs."""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6f"
SVG_HASH_SALT = "sgalign"


def _to_builtin(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return _to_builtin(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        # NaN is not valid JSON
        return None if np.isnan(value) else value
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(payload: Any, path: Path) -> Path:
    """Write JSON with sorted keys and 2-space indent; NaN becomes null."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_to_builtin(payload), sort_keys=True, indent=2, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_table(frame: pd.DataFrame, path: Path, index: bool = False) -> Path:
    """
    Write a metric table as CSV.

    Args:
        frame: Table to write
        path: Destination CSV path
        index: Whether to keep the index as the first column

    Returns:
        Path to the written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_confusion(confusion: pd.DataFrame, path: Path) -> Path:
    """Confusion matrix CSV with category names as header row and first column."""
    return write_table(confusion, path, index=True)


def records_table(
    records: Sequence[Dict[str, Any]], columns: Optional[List[str]] = None
) -> pd.DataFrame:
    """Rows of flat dicts to a DataFrame; an empty input keeps the column header."""
    return pd.DataFrame(list(records), columns=columns)


def create_metric_chart(
    table: pd.DataFrame,
    label_column: str,
    value_columns: Sequence[str],
    title: str,
    output_path: Path,
) -> Optional[Path]:
    """
    Grouped bar chart of metric columns per row label, saved as deterministic SVG.

    Returns:
        Path to the chart, or None when the table has no rows
    """
    if table.empty:
        return None
    sns.set_style("whitegrid")
    long = table.melt(
        id_vars=[label_column],
        value_vars=list(value_columns),
        var_name="metric",
        value_name="value",
    )
    long[label_column] = long[label_column].astype(str)

    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(10, 6))
        sns.barplot(data=long, x=label_column, y="value", hue="metric", ax=ax)
        ax.set_xlabel(label_column)
        ax.set_ylabel("Value")
        ax.set_title(title)
        ax.grid(True, alpha=0.3)

        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        plt.tight_layout()
        plt.savefig(output_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    logger.debug(f"wrote chart {output_path}")
    return output_path
