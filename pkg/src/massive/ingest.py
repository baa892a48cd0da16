"""Building sufficient statistics from individual-level rows or GWAS summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from massive.errors import (
    DegenerateInputError,
    InconsistentMomentsError,
    ParseError,
    PreconditionError,
)
from massive.likelihood import conditional_moments
from massive.types import SufficientStats

SUMMARY_COLUMNS = ("snp", "eaf", "beta_x", "se_x", "n_x", "beta_y", "se_y", "n_y")


@dataclass(frozen=True)
class SummaryRecord:
    eaf: float
    beta_x: float
    se_x: float
    n_x: int
    beta_y: float
    se_y: float
    n_y: int
    snp: str = ""

    def __post_init__(self):
        if not 0.0 < self.eaf < 1.0:
            raise PreconditionError(f"{self.snp or 'record'}: eaf must lie in (0, 1), got {self.eaf}")
        if not (self.se_x > 0 and self.se_y > 0):
            raise PreconditionError(f"{self.snp or 'record'}: standard errors must be positive")
        if self.n_x < 2 or self.n_y < 2:
            raise PreconditionError(f"{self.snp or 'record'}: sample sizes must be at least 2")
        for name in ("beta_x", "beta_y"):
            if not math.isfinite(getattr(self, name)):
                raise PreconditionError(f"{self.snp or 'record'}: {name} is not finite")


@dataclass(frozen=True)
class SummaryInput:
    records: list[SummaryRecord]
    beta_obs: float
    ploidy: int = 2
    n_obs: int | None = None

    def __post_init__(self):
        if len(self.records) < 1:
            raise PreconditionError("summary input needs at least one record")
        if self.ploidy < 1:
            raise PreconditionError("ploidy must be at least 1")
        if self.n_obs is not None and self.n_obs < 2:
            raise PreconditionError("n_obs must be at least 2")


def lower_median(values) -> float:
    """Median taking the lower of the two middle values for even counts."""
    v = np.sort(np.asarray(values, dtype=float))
    return float(v[(v.size - 1) // 2])


def moments_from_rows(rows, intercept: bool = False) -> SufficientStats:
    """Exact sample moments of an ``n x (J + 2)`` table with columns G_1..G_J, X, Y."""
    try:
        z = np.asarray(rows, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"non-numeric value in data table: {exc}") from None
    if z.ndim != 2 or z.shape[1] < 3:
        raise PreconditionError(f"expected an n x (J+2) table, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ParseError("data table contains missing or non-finite values")
    n, width = z.shape
    j = width - 2
    if n < j + 3:
        raise PreconditionError(f"need at least J + 3 = {j + 3} rows, got {n}")
    g, x, y = z[:, :j], z[:, j], z[:, j + 1]
    stats = SufficientStats(
        n=n,
        mean_g=g.mean(axis=0),
        mean_x=x.mean(),
        mean_y=y.mean(),
        m_gg=(g.T @ g) / n,
        m_gx=(g.T @ x) / n,
        m_gy=(g.T @ y) / n,
        m_xx=(x @ x) / n,
        m_yy=(y @ y) / n,
        m_xy=(x @ y) / n,
        intercept=intercept,
    )
    conditional_moments(stats)
    return stats


def stats_from_summary(s: SummaryInput, intercept: bool = False) -> SufficientStats:
    """Reconstruct first and second moments from per-variant regression summaries.

    Variants are treated as independent binomial(ploidy, eaf) draws. The
    exposure and outcome variances are estimated once per variant and combined
    by their (lower) median.
    """
    rec = s.records
    m = float(s.ploidy)
    q = np.array([r.eaf for r in rec])
    bx = np.array([r.beta_x for r in rec])
    by = np.array([r.beta_y for r in rec])
    sex = np.array([r.se_x for r in rec])
    sey = np.array([r.se_y for r in rec])
    nx = np.array([r.n_x for r in rec], dtype=float)
    ny = np.array([r.n_y for r in rec], dtype=float)

    mean_g = m * q
    var_g = m * q * (1.0 - q)
    mean_x = float(mean_g @ bx)
    mean_y = float(mean_g @ by)
    cov_gx = var_g * bx
    cov_gy = var_g * by
    var_x = lower_median(var_g * (bx**2 + nx * sex**2))
    var_y = lower_median(var_g * (by**2 + ny * sey**2))
    cov_xy = var_x * s.beta_obs

    sizes = [int(v) for v in np.concatenate([nx, ny])]
    if s.n_obs is not None:
        sizes.append(int(s.n_obs))
    try:
        stats = SufficientStats(
            n=min(sizes),
            mean_g=mean_g,
            mean_x=mean_x,
            mean_y=mean_y,
            m_gg=np.diag(var_g) + np.outer(mean_g, mean_g),
            m_gx=cov_gx + mean_g * mean_x,
            m_gy=cov_gy + mean_g * mean_y,
            m_xx=var_x + mean_x**2,
            m_yy=var_y + mean_y**2,
            m_xy=cov_xy + mean_x * mean_y,
            intercept=intercept,
        )
        conditional_moments(stats)
    except (DegenerateInputError, InconsistentMomentsError) as exc:
        raise InconsistentMomentsError(f"summary statistics are mutually inconsistent: {exc}") from None
    return stats


def summarize_rows(rows, ploidy: int = 2) -> SummaryInput:
    """Per-variant simple regressions of X and Y, as a GWAS would report them."""
    z = np.asarray(rows, dtype=float)
    n, width = z.shape
    j = width - 2
    g, x, y = z[:, :j], z[:, j], z[:, j + 1]
    gc = g - g.mean(axis=0)
    xc, yc = x - x.mean(), y - y.mean()
    ss_g = np.sum(gc**2, axis=0)
    records = []
    for k in range(j):
        fits = []
        for resp in (xc, yc):
            slope = gc[:, k] @ resp / ss_g[k]
            resid = resp - slope * gc[:, k]
            se = math.sqrt(resid @ resid / (n - 2) / ss_g[k])
            fits.append((float(slope), se))
        records.append(
            SummaryRecord(
                eaf=float(g[:, k].mean() / ploidy),
                beta_x=fits[0][0],
                se_x=fits[0][1],
                n_x=n,
                beta_y=fits[1][0],
                se_y=fits[1][1],
                n_y=n,
                snp=f"G{k + 1}",
            )
        )
    beta_obs = float(xc @ yc / (xc @ xc))
    return SummaryInput(records=records, beta_obs=beta_obs, ploidy=ploidy, n_obs=n)


# --------------------------------------------------------------------------
# CSV formats
# --------------------------------------------------------------------------


def _float(cell: str, where: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"{where}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(value):
        raise ParseError(f"{where}: non-finite value {cell!r}")
    return value


@dataclass
class RowsTable:
    columns: list[str]
    rows: np.ndarray = field(repr=False)


def read_rows_csv(path) -> RowsTable:
    """Read an individual-level table with header ``G1,...,GJ,X,Y``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if len(header) < 3 or header[-2:] != ["X", "Y"]:
            raise ParseError(f"{path}: header must end with X,Y, got {header}")
        data = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            data.append([_float(c, f"{path}:{lineno}") for c in row])
    if not data:
        raise ParseError(f"{path}: no data rows")
    return RowsTable(header, np.array(data))


def read_summary_csv(path) -> list[SummaryRecord]:
    """Read per-variant summaries with header ``snp,eaf,beta_x,se_x,n_x,beta_y,se_y,n_y``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path}: empty file")
        missing = [c for c in SUMMARY_COLUMNS if c not in [f.strip() for f in reader.fieldnames]]
        if missing:
            raise ParseError(f"{path}: missing columns {missing}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            where = f"{path}:{lineno}"
            if row["eaf"] == "":
                raise ParseError(f"{where}: missing effect allele frequency")
            try:
                records.append(
                    SummaryRecord(
                        eaf=_float(row["eaf"], where),
                        beta_x=_float(row["beta_x"], where),
                        se_x=_float(row["se_x"], where),
                        n_x=int(_float(row["n_x"], where)),
                        beta_y=_float(row["beta_y"], where),
                        se_y=_float(row["se_y"], where),
                        n_y=int(_float(row["n_y"], where)),
                        snp=row["snp"],
                    )
                )
            except PreconditionError as exc:
                raise ParseError(f"{where}: {exc}") from None
    if not records:
        raise ParseError(f"{path}: no summary records")
    return records


def summary_csv_text(summary: SummaryInput) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for r in summary.records:
        writer.writerow([r.snp, repr(r.eaf), repr(r.beta_x), repr(r.se_x), r.n_x, repr(r.beta_y), repr(r.se_y), r.n_y])
    return buf.getvalue()


def write_summary_csv(path, summary: SummaryInput) -> None:
    Path(path).write_text(summary_csv_text(summary), encoding="utf-8")
