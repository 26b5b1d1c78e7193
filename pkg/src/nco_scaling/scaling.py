"""Model grid, FLOPs accounting and power-law fitting.

Fit forms:

* ``fit_power``      gap = (X_c / x) ** alpha             (x = N, S or C)
* ``fit_bivariate``  gap = (c1 / x1) ** b1 * (c2 / x2) ** b2   (D,W) or (N,A)
* ``fit_shifted``    gap = alpha_t * t ** (-beta_t) + gamma
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from .model import ModelConfig, param_count

GRID_DEPTHS = (6, 12, 24, 42)
GRID_WIDTHS = (128, 256, 512)
# width -> (heads, per-head qkv dim)
GRID_HEADS = {128: (8, 16), 256: (16, 16), 512: (16, 32)}


class FitError(ValueError):
    pass


class RankError(FitError):
    pass


def grid() -> list[ModelConfig]:
    """The 12 depth x width configurations, depth-major."""
    out = []
    for d in GRID_DEPTHS:
        for w in GRID_WIDTHS:
            h, dk = GRID_HEADS[w]
            out.append(ModelConfig(depth=d, width=w, heads=h, qkv_dim=dk, ffn_dim=4 * w))
    return out


def fit_param_constant(configs: Sequence[ModelConfig] | None = None) -> float:
    """Least-squares c in N ~ c * D * W^2."""
    configs = list(configs or grid())
    z = np.array([c.depth * c.width ** 2 for c in configs], dtype=float)
    n = np.array([param_count(c).exact for c in configs], dtype=float)
    return float((z @ n) / (z @ z))


def token_count(n: int) -> int:
    """Rows processed per solution: n steps, each over a fixed n+2 row sequence."""
    return n * (n + 2)


def flops_per_solution(config: ModelConfig, n: int, beam: int = 1) -> float:
    """GFLOPs per constructed solution: 2 * params * tokens * beam."""
    if beam < 1:
        raise ValueError("beam must be >= 1")
    return 2.0 * param_count(config).exact * token_count(n) * beam / 1e9


# ----------------------------------------------------------------------------
# goodness of fit
# ----------------------------------------------------------------------------

def r2_mape(y, pred) -> tuple[float, float]:
    y = np.asarray(y, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if len(y) < 2:
        raise FitError("need at least 2 points")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise FitError("r2 undefined for zero-variance targets")
    r2 = 1.0 - float(((y - pred) ** 2).sum()) / ss_tot
    mape = float(np.mean(np.abs(pred - y) / y) * 100.0)
    return r2, mape


def _positive(name, arr):
    arr = np.asarray(arr, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0):
        raise FitError(f"{name} must be finite and positive")
    return arr


# ----------------------------------------------------------------------------
# univariate power law
# ----------------------------------------------------------------------------

@dataclass
class PowerLawFit:
    alpha: float
    x_c: float
    r2: float
    mape: float
    n_points: int
    method: str = "gap"

    def predict(self, x):
        return (self.x_c / np.asarray(x, dtype=float)) ** self.alpha

    def to_dict(self) -> dict:
        return asdict(self)


def _loglinear(x, y) -> tuple[float, float]:
    """Least squares of log y = k - alpha * log x; returns (alpha, k)."""
    A = np.column_stack([np.ones(len(x)), np.log(x)])
    (k, slope), *_ = np.linalg.lstsq(A, np.log(y), rcond=None)
    return -float(slope), float(k)


def fit_power(x, gap, method: str = "gap") -> PowerLawFit:
    """Fit gap = (X_c/x)^alpha.

    ``method="log"`` is ordinary least squares on log gap. ``method="gap"``
    (default) starts there and minimises squared error on the gaps
    themselves.
    """
    x = _positive("x", x)
    y = _positive("gap", gap)
    if len(x) < 2:
        raise FitError("need at least 2 points")
    if np.ptp(np.log(x)) == 0:
        raise RankError("all x values are equal")
    alpha, k = _loglinear(x, y)
    if method == "gap":
        lx = np.log(x)
        # parametrise by (alpha, k = alpha*log X_c) to stay well-posed when alpha -> 0
        res = least_squares(lambda p: np.exp(p[1] - p[0] * lx) - y, [alpha, k], method="lm",
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
        alpha, k = float(res.x[0]), float(res.x[1])
    elif method != "log":
        raise ValueError("method must be 'gap' or 'log'")
    x_c = math.exp(k / alpha) if alpha != 0 else math.inf
    fit = PowerLawFit(alpha, x_c, 0.0, 0.0, len(x), method)
    pred = np.exp(k - alpha * np.log(x))
    fit.r2, fit.mape = r2_mape(y, pred)
    return fit


# ----------------------------------------------------------------------------
# bivariate power law
# ----------------------------------------------------------------------------

@dataclass
class BivariateFit:
    form: str  # "WD" (x1=D, x2=W) or "NA" (x1=N, x2=A=D/W)
    exponents: tuple[float, float]
    normalizers: tuple[float, float]
    r2: float
    mape: float
    n_points: int
    method: str = "log"
    param_constant: float | None = None

    def predict(self, x1, x2):
        (b1, b2), (c1, c2) = self.exponents, self.normalizers
        return (c1 / np.asarray(x1, float)) ** b1 * (c2 / np.asarray(x2, float)) ** b2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["exponents"] = list(self.exponents)
        d["normalizers"] = list(self.normalizers)
        return d


def fit_bivariate(x1, x2, gap, form: str = "WD", method: str = "log",
                  param_constant: float | None = None, c1: float | None = None) -> BivariateFit:
    """Fit gap = (c1/x1)^b1 (c2/x2)^b2 by two-variable regression in log space.

    Only the product of the two normalizer terms is identifiable. Unless
    ``c1`` is pinned, the intercept is split evenly (b1 log c1 == b2 log c2).
    ``method="gap"`` refines the log solution by least squares on the gaps.
    """
    x1 = _positive("x1", x1)
    x2 = _positive("x2", x2)
    y = _positive("gap", gap)
    if len(y) < 3:
        raise FitError("need at least 3 points")
    A = np.column_stack([np.ones(len(y)), np.log(x1), np.log(x2)])
    if np.linalg.matrix_rank(A) < 3:
        raise RankError("design matrix is rank deficient (a variable does not vary independently)")
    (k, s1, s2), *_ = np.linalg.lstsq(A, np.log(y), rcond=None)
    b1, b2 = -float(s1), -float(s2)
    if method == "gap":
        res = least_squares(lambda p: np.exp(A @ p) - y, [k, -b1, -b2], method="lm",
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
        k, b1, b2 = float(res.x[0]), -float(res.x[1]), -float(res.x[2])
    elif method != "log":
        raise ValueError("method must be 'gap' or 'log'")
    if c1 is None:
        c1 = math.exp(k / (2 * b1)) if b1 else math.inf
        c2 = math.exp(k / (2 * b2)) if b2 else math.inf
    else:
        c1 = float(c1)
        c2 = math.exp((k - b1 * math.log(c1)) / b2) if b2 else math.inf
    pred = np.exp(k - b1 * np.log(x1) - b2 * np.log(x2))
    r2, mape = r2_mape(y, pred)
    return BivariateFit(form, (b1, b2), (c1, c2), r2, mape, len(y), method, param_constant)


def fit_depth_width(depths, widths, gap, method: str = "log") -> BivariateFit:
    return fit_bivariate(depths, widths, gap, "WD", method)


def fit_params_shape(configs: Sequence[ModelConfig], gap, method: str = "log",
                     n_unit: float = 1e6) -> BivariateFit:
    """Gap(N, A) with N from ``param_count`` (in units of ``n_unit``) and A = D/W."""
    n = np.array([param_count(c).exact for c in configs], dtype=float) / n_unit
    a = np.array([c.depth / c.width for c in configs], dtype=float)
    return fit_bivariate(n, a, gap, "NA", method, fit_param_constant(configs))


# ----------------------------------------------------------------------------
# shifted power law
# ----------------------------------------------------------------------------

@dataclass
class ShiftedFit:
    alpha_t: float  # scale coefficient
    beta_t: float  # decay exponent
    gamma: float  # asymptotic floor
    r2: float
    mape: float
    sse: float
    n_points: int
    converged: bool = True

    def predict(self, t):
        return self.alpha_t * np.asarray(t, dtype=float) ** (-self.beta_t) + self.gamma

    def to_dict(self) -> dict:
        return asdict(self)


def fit_shifted(t, gap, budget: int = 200) -> ShiftedFit:
    """Fit gap = alpha_t * t^-beta_t + gamma with gamma >= 0.

    Profile over gamma in [0, min(gap)) with a log-linear solve for (alpha_t, beta_t) at
    each gamma, then polish all three jointly. gamma = 0 (a pure power law)
    is always a candidate, so the result never fits worse than one.
    """
    t = _positive("t", t)
    y = _positive("gap", gap)
    if len(t) < 4:
        raise FitError("need at least 4 points")
    lt = np.log(t)

    def inner(g):
        b, k = _loglinear(t, y - g)
        return math.exp(k), b

    def sse(params):
        a, b, g = params
        return float(((a * np.exp(-b * lt) + g - y) ** 2).sum())

    hi = float(y.min()) * (1 - 1e-9)
    prof = minimize_scalar(lambda g: sse((*inner(g), g)), bounds=(0.0, hi), method="bounded",
                           options={"xatol": 1e-14 * max(hi, 1e-300), "maxiter": budget})
    g0 = float(prof.x)
    starts = [(*inner(g0), g0), (*inner(0.0), 0.0)]
    candidates = []
    for a0, b0, gs in starts:
        res = least_squares(lambda p: p[0] * np.exp(-p[1] * lt) + p[2] - y, [a0, b0, gs],
                            bounds=([-np.inf, -np.inf, 0.0], [np.inf, np.inf, np.inf]),
                            method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=50 * budget)
        candidates.append((sse(res.x), tuple(float(v) for v in res.x), bool(res.success)))
        candidates.append((sse((a0, b0, gs)), (a0, b0, gs), bool(prof.success)))
    best_sse, (a, b, g), ok = min(candidates, key=lambda c: c[0])
    r2, mape = r2_mape(y, a * np.exp(-b * lt) + g)
    return ShiftedFit(a, b, max(g, 0.0), r2, mape, best_sse, len(y), ok)


# ----------------------------------------------------------------------------
# evaluation records
# ----------------------------------------------------------------------------

@dataclass
class EvalRecord:
    depth: int
    width: int
    heads: int
    qkv_dim: int
    ffn_dim: int
    params: int
    decode: str
    beam: int
    dataset: str
    n: int
    mean_gap_pct: float
    wall_seconds: float
    gflops_per_solution: float
    samples_seen: int = 0

    def __post_init__(self):
        for f in ("params", "beam", "n", "wall_seconds", "gflops_per_solution", "samples_seen"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be nonnegative")

    @property
    def config(self) -> ModelConfig:
        return ModelConfig(self.depth, self.width, self.heads, self.qkv_dim, self.ffn_dim)


EVAL_COLUMNS = [f.name for f in fields(EvalRecord)]


def write_records(path, records: Sequence[EvalRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in EVAL_COLUMNS)])


def read_records(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != EVAL_COLUMNS:
            raise ValueError(f"EvalRecord CSV must have columns {EVAL_COLUMNS}")
        cast = {"int": int, "float": float, "str": str}
        return [EvalRecord(**{f.name: cast[f.type](row[f.name]) for f in fields(EvalRecord)}) for row in rd]


# ----------------------------------------------------------------------------
# fixtures
# ----------------------------------------------------------------------------

FIXTURE_ENV = "NCO_FIXTURE_DIR"


def fixture_path(name: str) -> Path:
    if not name.endswith(".csv"):
        name += ".csv"
    override = os.environ.get(FIXTURE_ENV)
    if override:
        return Path(override) / name
    return Path(str(resources.files("nco_scaling") / "fixtures" / name))


def load_fixture(name: str) -> list[dict]:
    """Rows of a bundled CSV with numeric cells converted."""
    with open(fixture_path(name), newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k, v in row.items():
            try:
                row[k] = int(v)
            except ValueError:
                try:
                    row[k] = float(v)
                except ValueError:
                    pass
    return rows


def table1():
    return load_fixture("table1.csv")


def table9():
    return load_fixture("table9.csv")


def table12():
    return load_fixture("table12.csv")


def table13():
    return load_fixture("table13.csv")


def table_ood():
    return load_fixture("table_ood.csv")


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

def fit_report(form: str, fit, points: Sequence[Sequence[float]], **extra) -> dict:
    report = {"form": form, **fit.to_dict(), "points": [list(map(float, p)) for p in points]}
    report.update(extra)
    return report


def dump_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


@dataclass
class CurveSet:
    """Decoupled per-curve fits plus the single global fit over the same points."""

    global_fit: PowerLawFit
    by_width: dict[int, PowerLawFit] = field(default_factory=dict)
    by_depth: dict[int, PowerLawFit] = field(default_factory=dict)


def decoupled_fits(rows: Sequence[dict], x_key: str = "params_m", y_key: str = "gap_pct",
                   method: str = "gap") -> CurveSet:
    """Global fit over all rows, one fit per fixed width (depth scaling) and per fixed depth."""
    x = [r[x_key] for r in rows]
    y = [r[y_key] for r in rows]
    cs = CurveSet(fit_power(x, y, method))
    for w in sorted({r["width"] for r in rows}):
        sel = [r for r in rows if r["width"] == w]
        if len(sel) >= 2:
            cs.by_width[w] = fit_power([r[x_key] for r in sel], [r[y_key] for r in sel], method)
    for d in sorted({r["depth"] for r in rows}):
        sel = [r for r in rows if r["depth"] == d]
        if len(sel) >= 2:
            cs.by_depth[d] = fit_power([r[x_key] for r in sel], [r[y_key] for r in sel], method)
    return cs


def compute_curves(rows13: Sequence[dict] | None = None, n: int = 100,
                   method: str = "log") -> dict[tuple[int, int], PowerLawFit]:
    """Gap vs per-solution GFLOPs across beam widths, one fit per model (zero gaps dropped)."""
    rows13 = rows13 if rows13 is not None else table13()
    cfgs = {(c.depth, c.width): c for c in grid()}
    out = {}
    for key in sorted({(r["depth"], r["width"]) for r in rows13}):
        sel = [r for r in rows13 if (r["depth"], r["width"]) == key and r["gap_pct"] > 0]
        c = [flops_per_solution(cfgs[key], n, r["beam"]) for r in sel]
        out[key] = fit_power(c, [r["gap_pct"] for r in sel], method)
    return out

