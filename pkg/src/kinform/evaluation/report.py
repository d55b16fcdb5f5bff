"""Per-class accuracy reports and their text, CSV and JSON renderings."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from ..data.kinship import KinshipClass

# column orders of the two published result layouts
MAIN_ORDER = ("BB", "SS", "SIBS", "FD", "FS", "MD", "MS")
ABLATION_ORDER = ("BB", "SS", "SIBS", "FS", "FD", "MS", "MD")


def header_label(tag: str) -> str:
    """Printed column name: ``FD`` -> ``F-D``, ``GMGS`` -> ``GM-GS``, ``SIBS`` unchanged."""
    tag = KinshipClass.parse(tag).tag
    if tag == "SIBS":
        return tag
    half = len(tag) // 2
    return f"{tag[:half]}-{tag[half:]}"


@dataclass
class EvalReport:
    accuracy: dict  # class tag -> accuracy percent
    counts: dict = field(default_factory=dict)  # class tag -> scored pairs
    skipped: dict = field(default_factory=dict)  # class tag -> pairs without a head
    name: str = "Ours"
    fold: Optional[int] = None
    protocol: str = "unrestricted"
    config_digest: str = ""
    seed: int = 0
    threshold: str = "0.5"
    stored_average: Optional[float] = None

    @property
    def average(self) -> float:
        """Unweighted class mean, unless the report carries a published average."""
        if self.stored_average is not None:
            return self.stored_average
        vals = list(self.accuracy.values())
        return sum(vals) / len(vals) if vals else float("nan")

    def row(self, order: Sequence[str] = MAIN_ORDER, decimals: int = 1) -> str:
        """Accuracies in ``order`` then the average, e.g. ``"85.9 86.3 ... | 79.6"``."""
        cells = [_cell(self.accuracy.get(t), decimals) for t in order]
        return " ".join(cells) + " | " + _cell(self.average, decimals)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["average"] = self.average
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        data = {k: v for k, v in data.items() if k != "average"}
        return cls(**data)


def _cell(v, decimals: int) -> str:
    return "-" if v is None else f"{v:.{decimals}f}"


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def mean_report(reports: Sequence[EvalReport], name: Optional[str] = None) -> EvalReport:
    """Average per-class accuracy over folds."""
    if not reports:
        raise ValueError("no reports to average")
    tags = [t for t in MAIN_ORDER if any(t in r.accuracy for r in reports)]
    tags += [t for r in reports for t in r.accuracy if t not in tags]
    acc, counts, skipped = {}, {}, {}
    for t in dict.fromkeys(tags):
        vals = [r.accuracy[t] for r in reports if t in r.accuracy]
        acc[t] = sum(vals) / len(vals)
        counts[t] = sum(r.counts.get(t, 0) for r in reports)
    for r in reports:
        for t, n in r.skipped.items():
            skipped[t] = skipped.get(t, 0) + n
    first = reports[0]
    return EvalReport(acc, counts, skipped, name or first.name, None, first.protocol, first.config_digest,
                      first.seed, first.threshold)


def render_table(reports: Sequence[EvalReport], order: Sequence[str] = MAIN_ORDER, decimals: int = 1,
                 avg_label: str = "Avg.", footer: bool = True) -> str:
    """Aligned text table, one row per report."""
    heads = ["Method"] + [header_label(t) for t in order] + [avg_label]
    rows = [[r.name] + [_cell(r.accuracy.get(t), decimals) for t in order] + [_cell(r.average, decimals)]
            for r in reports]
    widths = [max(len(str(row[i])) for row in [heads] + rows) for i in range(len(heads))]
    lines = ["  ".join(h.ljust(widths[0]) if i == 0 else h.rjust(widths[i]) for i, h in enumerate(heads))]
    for row in rows:
        lines.append("  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(row)))
    if footer and reports:
        r = reports[0]
        lines.append(f"# protocol={r.protocol} seed={r.seed} threshold={r.threshold} config={r.config_digest[:16]}")
        for rep in reports:
            if rep.skipped:
                lines.append(f"# {rep.name}: skipped (no head) " + ", ".join(f"{k}={v}" for k, v in rep.skipped.items()))
    return "\n".join(lines) + "\n"


def reports_to_csv(reports: Sequence[EvalReport], order: Sequence[str] = MAIN_ORDER) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", *order, "average", "fold", "protocol", "seed", "threshold", "config_digest"])
    for r in reports:
        w.writerow([r.name, *[_raw(r.accuracy.get(t)) for t in order], _raw(r.average),
                    "" if r.fold is None else r.fold, r.protocol, r.seed, r.threshold, r.config_digest])
    return buf.getvalue()


def _raw(v) -> str:
    return "" if v is None else repr(float(v))


def reports_to_json(reports: Sequence[EvalReport], **extra) -> str:
    payload = dict(extra)
    payload["reports"] = [r.to_dict() for r in reports]
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_reports(reports: Sequence[EvalReport], out_dir, stem: str = "report", order: Sequence[str] = MAIN_ORDER,
                  decimals: int = 1, **extra) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}.txt", out / f"{stem}.csv", out / f"{stem}.json"]
    paths[0].write_text(render_table(reports, order, decimals), encoding="utf-8")
    paths[1].write_text(reports_to_csv(reports, order), encoding="utf-8")
    paths[2].write_text(reports_to_json(reports, **extra), encoding="utf-8")
    return paths
