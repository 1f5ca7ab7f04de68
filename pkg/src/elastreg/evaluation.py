"""Fiducial accuracy statistics and report files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .energy import consistency_residual
from .errors import PairingError
from .volume import DisplacementField

STAGES = ("unregistered", "rigid", "elastic")
REPORT_HEADER = ("stage", "mean_mm", "std_mm", "max_mm", "mean_time_s")


@dataclass(frozen=True)
class ReportRow:
    stage: str
    mean_mm: float
    std_mm: float
    max_mm: float
    mean_time_s: float = 0.0


@dataclass
class AccuracyReport:
    rows: list = field(default_factory=list)
    n_pairs: int = 0
    extra: dict = field(default_factory=dict)

    def row(self, stage: str) -> ReportRow:
        for r in self.rows:
            if r.stage == stage:
                return r
        raise KeyError(stage)


def _map_points(mapping, pts: np.ndarray) -> np.ndarray:
    if mapping is None:
        return pts
    if isinstance(mapping, DisplacementField):
        return mapping.map_points(pts)
    if hasattr(mapping, "map_points"):
        return mapping.map_points(pts)
    if hasattr(mapping, "apply"):
        return mapping.apply(pts)
    return np.asarray(mapping(pts), dtype=np.float64)


def fiducial_distances(fixed, moving, mapping=None) -> np.ndarray:
    """Per-pair distance |map(p_fixed) - p_moving| (mm), pairs ordered by id.

    ``mapping`` takes fixed-space points to moving space: a displacement field,
    a rigid transform, a registration result, or any callable on (N, 3) arrays.
    """
    a, b = fixed.by_id(), moving.by_id()
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))
        raise PairingError(f"fiducial ids do not pair up; unmatched ids: {missing}")
    ids = sorted(a)
    if not ids:
        raise PairingError("no fiducial pairs")
    p = np.array([a[i] for i in ids])
    q = np.array([b[i] for i in ids])
    return np.linalg.norm(_map_points(mapping, p) - q, axis=1)


def fiducial_stats(fixed, moving, mapping=None) -> tuple[float, float, float]:
    """(mean, population std, max) of the paired fiducial distances in mm."""
    d = fiducial_distances(fixed, moving, mapping)
    return float(d.mean()), float(d.std()), float(d.max())


def consistency_stats(phi: DisplacementField, psi: DisplacementField) -> tuple[float, float]:
    """Mean and max of |psi(phi(x)) - x| over the domain, in voxel units."""
    res, mask = consistency_residual(psi, phi)
    s = np.asarray(phi.spacing).reshape(3, 1, 1, 1)
    n = np.sqrt(np.sum((res.data / s) ** 2, axis=0))[mask]
    if n.size == 0:
        return 0.0, 0.0
    return float(n.mean()), float(n.max())


def psnr(reference: np.ndarray, test: np.ndarray, mask=None) -> float:
    """Peak signal-to-noise ratio in dB, peak = dynamic range of ``reference``."""
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    if mask is not None:
        ref, tst = ref[mask], tst[mask]
    mse = float(np.mean((ref - tst) ** 2))
    peak = float(ref.max() - ref.min())
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def report_csv(report: AccuracyReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in report.rows:
        w.writerow([r.stage, f"{r.mean_mm:.2f}", f"{r.std_mm:.2f}", f"{r.max_mm:.2f}",
                    f"{r.mean_time_s:.2f}"])
    return buf.getvalue()


def report_text(report: AccuracyReport) -> str:
    lines = [f"n_pairs={report.n_pairs}"]
    for r in report.rows:
        for key in REPORT_HEADER[1:]:
            lines.append(f"{r.stage}.{key}={getattr(r, key):.2f}")
    for key, value in report.extra.items():
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def text_report_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".txt") if path.suffix.lower() == ".csv" else Path(str(path) + ".txt")


def write_report(report: AccuracyReport, path) -> tuple[Path, Path]:
    """Write the CSV table to ``path`` and the key=value block next to it."""
    path = Path(path)
    txt = text_report_path(path)
    for target, content in ((path, report_csv(report)), (txt, report_text(report))):
        try:
            target.write_text(content, newline="")
        except OSError as exc:
            raise OSError(f"cannot write report {target}: {exc}") from exc
    return path, txt


def read_report(path) -> AccuracyReport:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read report {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != REPORT_HEADER:
        raise ValueError(f"{path}: not an accuracy report CSV")
    out = [ReportRow(r[0], *(float(v) for v in r[1:5])) for r in rows[1:] if r]
    n_pairs = 0
    txt = text_report_path(path)
    if txt.exists():
        for line in txt.read_text().splitlines():
            if line.startswith("n_pairs="):
                n_pairs = int(line.split("=", 1)[1])
    return AccuracyReport(out, n_pairs)


def build_report(fixed, moving, mappings: dict | None = None,
                 times: dict | None = None) -> AccuracyReport:
    """Rows for 'unregistered' plus each supplied stage mapping, in stage order."""
    mappings = mappings or {}
    times = times or {}
    rows = [ReportRow("unregistered", *fiducial_stats(fixed, moving, None), 0.0)]
    for stage in STAGES[1:]:
        if stage in mappings:
            rows.append(ReportRow(stage, *fiducial_stats(fixed, moving, mappings[stage]),
                                  float(times.get(stage, 0.0))))
    return AccuracyReport(rows, len(fiducial_distances(fixed, moving)))
