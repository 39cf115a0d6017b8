"""
Plain-text tables and CSV output for command results
"""
import csv
from pathlib import Path
from typing import Iterable, List, Sequence

from hybridtower.utils.logger import get_logger

logger = get_logger("report")


def format_table(headers: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Left-aligned fixed-width table with a rule under the header"""
    rows = [[str(cell) for cell in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
             "  ".join("-" * w for w in widths)]
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def write_csv(path: Path, headers: Sequence[str], rows: Iterable[Sequence]) -> int:
    """
    Write a CSV file with a header row (minimal quoting, CRLF line ends)

    Returns:
        Number of data rows written
    """
    count = 0
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
            writer.writerow(headers)
            for row in rows:
                writer.writerow(row)
                count += 1
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise
    logger.info(f"Wrote {count} rows to {path}")
    return count


def float_cells(values: Iterable[float]) -> List[str]:
    """Round-trippable text for float columns"""
    return [repr(float(v)) for v in values]
