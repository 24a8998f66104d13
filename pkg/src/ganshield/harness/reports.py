"""CSV reports.

Floats are written with ``repr`` so a row read back compares equal to the
row that was written. Every table row carries the config hash and build id.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

from .. import __version__

BUILD_ID = f"v{__version__}"

SCHEMAS: dict[str, tuple[tuple[str, type], ...]] = {
    "table1": (
        ("dataset", str),
        ("attack", str),
        ("epsilon", float),
        ("acc_orig", float),
        ("acc_adv", float),
        ("acc_clean", float),
        ("success_rate", float),
        ("detected", float),
    ),
    "table2": (
        ("dataset", str),
        ("attack", str),
        ("epsilon", float),
        ("acc_adv", float),
        ("acc_defensegan", float),
        ("acc_cowboy", float),
        ("z0_defensegan", str),
        ("z0_cowboy", str),
    ),
    "violin": (("dataset", str), ("source", str), ("index", int), ("score", float)),
    "gan_sweep": (
        ("step", int),
        ("acc_adv", float),
        ("acc_clean", float),
        ("score_real", float),
        ("score_adv", float),
        ("separation", float),
    ),
    "attack": (
        ("attack", str),
        ("index", int),
        ("label", int),
        ("success", int),
        ("x_orig", str),
        ("x_adv", str),
        ("attack_config", str),
    ),
    "detect": (("source", str), ("index", int), ("score", float), ("flagged", int), ("tau", float)),
    "clean": (
        ("attack", str),
        ("index", int),
        ("label", int),
        ("pred_adv", int),
        ("pred_clean", int),
        ("loss", float),
        ("restart", int),
    ),
}
PROVENANCE = (("config_hash", str), ("build_id", str))


@dataclass
class ExperimentReport:
    """Rows of one table; ``provenance`` adds the config hash and build id columns."""

    kind: str
    config_hash: str
    rows: list[dict] = field(default_factory=list)
    provenance: bool = True

    @property
    def columns(self) -> tuple[tuple[str, type], ...]:
        return SCHEMAS[self.kind] + (PROVENANCE if self.provenance else ())

    def add(self, **values):
        names = [n for n, _ in SCHEMAS[self.kind]]
        if sorted(values) != sorted(names):
            raise ValueError(f"{self.kind} row needs columns {names}, got {sorted(values)}")
        row = {n: t(values[n]) for n, t in SCHEMAS[self.kind]}
        if self.provenance:
            row.update(config_hash=self.config_hash, build_id=BUILD_ID)
        self.rows.append(row)
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([n for n, _ in self.columns])
        for row in self.rows:
            w.writerow([_cell(row[n]) for n, _ in self.columns])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


def _cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def parse_csv(text: str, kind: str) -> list[dict]:
    """Typed rows back from ``ExperimentReport.to_csv`` output."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    types = dict(SCHEMAS[kind] + PROVENANCE)
    unknown = [h for h in header if h not in types]
    if unknown:
        raise ValueError(f"unexpected {kind} column(s) {unknown}")
    return [{h: types[h](cell) for h, cell in zip(header, line)} for line in reader]


def read_csv(path, kind: str) -> list[dict]:
    return parse_csv(Path(path).read_text(), kind)
