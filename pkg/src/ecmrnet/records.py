"""Evaluation records: CSV persistence and the markdown summary."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

CSV_COLUMNS = ("task_id", "checkpoint_after", "psnr_db", "ssim", "params", "macs")


class RecordError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    task_id: str
    checkpoint_after: str
    psnr_db: float
    ssim: float
    params: int
    macs: int
    # wall-clock stamp; informative only, never compared or serialized
    timestamp: float = field(default=0.0, compare=False)


def records_to_csv(records: Iterable[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        # repr round-trips floats exactly
        w.writerow([r.task_id, r.checkpoint_after, repr(float(r.psnr_db)), repr(float(r.ssim)),
                    int(r.params), int(r.macs)])
    return buf.getvalue()


def records_from_csv(text: str) -> list[EvalRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []               # a never-written file holds no records
    if tuple(rows[0]) != CSV_COLUMNS:
        raise RecordError(f"bad header {rows[0]!r}")
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise RecordError(f"line {line}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
        try:
            out.append(EvalRecord(row[0], row[1], float(row[2]), float(row[3]),
                                  int(row[4]), int(row[5])))
        except ValueError as exc:
            raise RecordError(f"line {line}: {exc}") from None
    return out


def write_records(path, records: Iterable[EvalRecord]) -> None:
    Path(path).write_text(records_to_csv(records))


def read_records(path) -> list[EvalRecord]:
    return records_from_csv(Path(path).read_text())


def _ordered(items: Iterable[str]) -> list[str]:
    seen: list[str] = []
    for it in items:
        if it not in seen:
            seen.append(it)
    return seen


def forgetting_matrix(records: Sequence[EvalRecord]) -> dict[str, dict[str, float]]:
    """PSNR at each later checkpoint minus PSNR at the task's own checkpoint."""
    base = {r.task_id: r.psnr_db for r in records if r.task_id == r.checkpoint_after}
    out: dict[str, dict[str, float]] = {}
    for r in records:
        if r.task_id in base:
            out.setdefault(r.task_id, {})[r.checkpoint_after] = r.psnr_db - base[r.task_id]
    return out


def _fmt(x: float, digits: int) -> str:
    return "inf" if math.isinf(x) else f"{x:.{digits}f}"


def render_markdown(records: Sequence[EvalRecord]) -> str:
    """Rows are tasks; columns are PSNR/SSIM after each checkpoint, then the
    final activated params/MACs. A forgetting matrix follows."""
    tasks = _ordered(r.task_id for r in records)
    ckpts = _ordered(r.checkpoint_after for r in records)
    cell = {(r.task_id, r.checkpoint_after): r for r in records}
    head = ["task"] + [f"after {c}" for c in ckpts] + ["params", "MACs"]
    lines = ["## Evaluation (PSNR dB / SSIM)", "",
             "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for t in tasks:
        row = [t]
        last = None
        for c in ckpts:
            r = cell.get((t, c))
            row.append("" if r is None else f"{_fmt(r.psnr_db, 2)} / {r.ssim:.4f}")
            last = r or last
        row += [str(last.params), str(last.macs)] if last else ["", ""]
        lines.append("| " + " | ".join(row) + " |")
    fm = forgetting_matrix(records)
    head = ["task"] + [f"after {c}" for c in ckpts]
    lines += ["", "## Forgetting (PSNR change since finalization, dB)", "",
              "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for t in tasks:
        deltas = fm.get(t, {})
        lines.append("| " + " | ".join([t] + [f"{deltas[c]:+.4f}" if c in deltas else ""
                                               for c in ckpts]) + " |")
    return "\n".join(lines) + "\n"
