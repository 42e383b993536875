"""
Evaluation rows and per-iteration training metrics, both kept as CSV.
"""

import csv
import logging
import os
from dataclasses import asdict, dataclass, fields

from collabdet.errors import ConfigurationError, InvalidInputError

logger = logging.getLogger(__name__)

DETECTOR_TAGS = ("I_W", "CL_W", "CL_S", "CS_S")
RUN_LOG_NAME = "runlog.csv"


@dataclass
class RunLogRow:
    epoch: int
    detector: str
    map: float
    corloc: float
    loss_weak: float = 0.0
    loss_strong: float = 0.0
    cp_inter: float = 0.0
    cp_inner: float = 0.0
    cl_inter: float = 0.0
    matched_pairs: int = 0


RUN_LOG_FIELDS = [f.name for f in fields(RunLogRow)]


class RunLog:
    """
    Rows ordered by epoch, at most one per (epoch, detector).
    """

    def __init__(self, rows=None):
        self.rows = []
        for row in rows or []:
            self.append(row)

    def append(self, row):
        if row.detector not in DETECTOR_TAGS:
            raise InvalidInputError(f"Unknown detector tag {row.detector!r}")
        if self.rows and row.epoch < self.rows[-1].epoch:
            raise InvalidInputError(f"Epoch {row.epoch} logged after epoch {self.rows[-1].epoch}")
        if any(r.epoch == row.epoch and r.detector == row.detector for r in self.rows):
            raise InvalidInputError(f"Duplicate row for epoch {row.epoch}, detector {row.detector}")
        self.rows.append(row)

    def detectors(self):
        return sorted({row.detector for row in self.rows}, key=DETECTOR_TAGS.index)

    def series(self, detector, metric="map"):
        """(epochs, values) for one detector tag."""
        rows = [row for row in self.rows if row.detector == detector]
        return [row.epoch for row in rows], [getattr(row, metric) for row in rows]

    def final(self, detector):
        rows = [row for row in self.rows if row.detector == detector]
        return rows[-1] if rows else None

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, RunLog) and self.rows == other.rows

    def write_csv(self, path):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=RUN_LOG_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in asdict(row).items()})
        return path

    @classmethod
    def read_csv(cls, path):
        if not os.path.exists(path):
            raise ConfigurationError(f"Run log not found: {path}")
        with open(path, "r", newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != RUN_LOG_FIELDS:
                raise ConfigurationError(f"Unexpected run log header {reader.fieldnames}")
            rows = []
            for raw in reader:
                rows.append(RunLogRow(
                    epoch=int(raw["epoch"]), detector=raw["detector"], map=float(raw["map"]),
                    corloc=float(raw["corloc"]), loss_weak=float(raw["loss_weak"]),
                    loss_strong=float(raw["loss_strong"]), cp_inter=float(raw["cp_inter"]),
                    cp_inner=float(raw["cp_inner"]), cl_inter=float(raw["cl_inter"]),
                    matched_pairs=int(raw["matched_pairs"])))
        return cls(rows)


ITERATION_FIELDS = ["epoch", "iteration", "image_id", "lr", "loss_weak", "loss_strong", "loss_objectness",
                    "cp_inter", "cp_inner", "cl_inter", "matched_pairs"]


class IterationLog:
    """Per-step loss breakdown streamed to a CSV file."""

    def __init__(self, path):
        self.path = path
        self.rows = 0
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self._file = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._file, fieldnames=ITERATION_FIELDS)
        self._writer.writeheader()

    def write(self, **values):
        row = {name: values.get(name, 0) for name in ITERATION_FIELDS}
        self._writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
        self.rows += 1

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
