"""Evaluation reports and embedding diagnostics, plus CSV/JSON/SVG emission."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .decoding import DecodeSpec, argmax_lowest_id, decode_many
from .instances import Dataset, batch_tour_costs
from .model import ConstructionState, Model, gather_inputs, n_scale_for, param_count, row_order, step_probs
from .scaling import EvalRecord, flops_per_solution


class UnlabelledError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


def _need_labels(ds: Dataset) -> None:
    if not ds.labelled:
        raise UnlabelledError("dataset carries no reference tours")


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

@dataclass
class EvalResult:
    orders: np.ndarray
    costs: np.ndarray
    gaps: np.ndarray  # percent, per instance
    wall_seconds: float
    record: EvalRecord | None = None

    @property
    def mean_gap(self) -> float:
        return float(self.gaps.mean())

    def tour_rows(self) -> list[dict]:
        return [{"instance": i, "tour": [int(v) for v in o], "cost": float(c), "gap_pct": float(g)}
                for i, (o, c, g) in enumerate(zip(self.orders, self.costs, self.gaps))]


def score_orders(ds: Dataset, orders: np.ndarray, wall_seconds: float = 0.0) -> EvalResult:
    """Gaps of given tours against the dataset references."""
    _need_labels(ds)
    orders = np.asarray(orders)
    costs = batch_tour_costs(ds.coords, orders)
    gaps = 100.0 * (costs - ds.costs) / ds.costs
    return EvalResult(orders, costs, gaps, wall_seconds)


def evaluate(model: Model, ds: Dataset, spec: DecodeSpec | str = "greedy", threads: int = 1,
             dataset_id: str = "", samples_seen: int = 0) -> EvalResult:
    _need_labels(ds)
    spec = DecodeSpec.parse(spec) if isinstance(spec, str) else spec
    t0 = time.perf_counter()
    orders = decode_many(model, ds.coords, spec, threads)
    res = score_orders(ds, orders, time.perf_counter() - t0)
    c = model.config
    res.record = EvalRecord(
        depth=c.depth, width=c.width, heads=c.heads, qkv_dim=c.qkv_dim, ffn_dim=c.ffn_dim,
        params=param_count(c).exact, decode=str(spec), beam=spec.beam_factor,
        dataset=dataset_id or f"{ds.kind}{ds.n}", n=ds.n, mean_gap_pct=res.mean_gap,
        wall_seconds=res.wall_seconds, gflops_per_solution=flops_per_solution(c, ds.n, spec.beam_factor),
        samples_seen=samples_seen)
    return res


# ----------------------------------------------------------------------------
# long-sightedness
# ----------------------------------------------------------------------------

# policy(coords (B,n,2), states, targets (B,)) -> chosen nodes (B,)
Policy = Callable[[np.ndarray, list, np.ndarray], np.ndarray]


def oracle_policy(coords, states, targets):
    return np.asarray(targets)


def nearest_policy(coords, states, targets):
    out = []
    for c, st in zip(coords, states):
        avail = st.available()
        d = np.linalg.norm(c[avail] - c[st.current], axis=1)
        out.append(int(avail[np.lexsort((avail, d))[0]]))
    return np.array(out)


def model_policy(model: Model) -> Policy:
    def choose(coords, states, targets):
        scale = n_scale_for(model.n_train, coords.shape[1])
        s_xy, a_xy, c_xy, avail = gather_inputs(coords, states)
        p = step_probs(model.params, s_xy, a_xy, c_xy, scale).values[:, 1:-1]
        return argmax_lowest_id(avail, p)
    return choose


def neighbor_rank(coords: np.ndarray, state: ConstructionState, node: int) -> int:
    """1-based rank of ``node`` among available nodes by distance from the current node.

    Equal distances rank the lower node id first.
    """
    avail = state.available()
    d = np.linalg.norm(coords[avail] - coords[state.current], axis=1)
    hit = np.flatnonzero(avail == node)
    if len(hit) == 0:
        raise ValueError(f"node {node} is not available")
    # read the target's distance from the same vector so ulp noise cannot split ties
    dn = d[hit[0]]
    return 1 + int(np.sum((d < dn) | ((d == dn) & (avail < node))))


@dataclass
class LongSightReport:
    """Per-rank success counts; bucket K+1 pools every rank above K."""

    K: int
    attempts: np.ndarray  # (K+1,)
    successes: np.ndarray

    @property
    def rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.attempts > 0, self.successes / np.maximum(self.attempts, 1), np.nan)

    def rate_above(self, k: int) -> float:
        """Pooled success rate over ranks strictly greater than ``k``."""
        a = self.attempts[k:].sum()
        return float(self.successes[k:].sum() / a) if a else math.nan

    columns = ("rank", "attempts", "successes", "rate")

    def rows(self) -> list[tuple]:
        labels = [str(k) for k in range(1, self.K + 1)] + [f">{self.K}"]
        return [(lab, int(a), int(s), (float(s / a) if a else "")) for lab, a, s
                in zip(labels, self.attempts, self.successes)]

    def to_dict(self) -> dict:
        return {"K": self.K, "attempts": self.attempts.tolist(), "successes": self.successes.tolist(),
                "rates": [None if math.isnan(r) else float(r) for r in self.rates]}

    def plot(self) -> "Plot":
        ks = [k for k in range(1, self.K + 2) if self.attempts[k - 1] > 0]
        return Plot([Series("success rate", ks, [float(self.rates[k - 1]) for k in ks], "both")],
                    xlabel="neighbor rank of optimal next node", ylabel="success rate")


def long_sightedness(policy: Model | Policy, ds: Dataset, K: int = 10) -> LongSightReport:
    """Walk every reference tour; at each non-forced step ask the policy for the next node.

    Steps with a single available node are skipped because the choice is forced.
    """
    _need_labels(ds)
    if K < 1:
        raise ValueError("K must be >= 1")
    choose = model_policy(policy) if isinstance(policy, Model) else policy
    attempts = np.zeros(K + 1, dtype=np.int64)
    successes = np.zeros(K + 1, dtype=np.int64)
    n = ds.n
    for t in range(1, n - 1):
        states, targets = [], []
        for tour in ds.tours:
            visited = np.zeros(n, dtype=bool)
            visited[tour[:t]] = True
            states.append(ConstructionState(int(tour[0]), int(tour[t - 1]), visited, t - 1))
            targets.append(int(tour[t]))
        if not states:
            break
        picks = np.asarray(choose(ds.coords, states, np.array(targets)))
        for c, st, tgt, pick in zip(ds.coords, states, targets, picks):
            b = min(neighbor_rank(c, st, tgt), K + 1) - 1
            attempts[b] += 1
            successes[b] += int(pick == tgt)
    return LongSightReport(K, attempts, successes)


# ----------------------------------------------------------------------------
# embedding snapshots
# ----------------------------------------------------------------------------

@dataclass
class EmbeddingSnapshot:
    """Final-layer embeddings at one decision step.

    Rows are [start, available nodes in remaining reference order, current];
    the first available row is therefore the optimal next node.
    """

    embeddings: np.ndarray  # (a+2, W)
    node_ids: np.ndarray  # (a+2,)
    tags: list[str]  # "start" | "optimal" | "other" | "current"

    @property
    def available(self) -> np.ndarray:
        return self.embeddings[1:-1]

    @property
    def available_tags(self) -> list[str]:
        return self.tags[1:-1]


def snapshot(model: Model, coords: np.ndarray, tour: np.ndarray, t: int) -> EmbeddingSnapshot:
    """Snapshot after the first ``t`` nodes of the reference tour are placed (1 <= t <= n-1)."""
    coords = np.asarray(coords, dtype=np.float64)
    tour = np.asarray(tour)
    n = len(tour)
    if not 1 <= t <= n - 1:
        raise ValueError("t must lie in [1, n-1]")
    remaining = tour[t:]
    # hidden rows come out in model row order; reorder along the reference tour
    rows = row_order(coords[None], remaining[None])[0]
    _, H = step_probs(model.params, coords[tour[0]][None], coords[rows][None],
                      coords[tour[t - 1]][None], n_scale_for(model.n_train, n), return_hidden=True)
    H = H.values[0]
    pos = {int(v): i + 1 for i, v in enumerate(rows)}
    order = [0] + [pos[int(v)] for v in remaining] + [len(rows) + 1]
    ids = np.concatenate([[tour[0]], remaining, [tour[t - 1]]])
    tags = ["start", "optimal"] + ["other"] * (len(remaining) - 1) + ["current"]
    return EmbeddingSnapshot(H[order].copy(), ids, tags)


def cosine_map(rows) -> np.ndarray:
    """Pairwise cosine similarity; accepts a matrix or a snapshot (available rows)."""
    E = rows.available if isinstance(rows, EmbeddingSnapshot) else np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding row")
    U = E / norms[:, None]
    C = U @ U.T
    C = np.clip((C + C.T) / 2, -1.0, 1.0)
    np.fill_diagonal(C, 1.0)
    return C


@dataclass
class PcaResult:
    projection: np.ndarray  # (m, 2)
    explained: tuple[float, float]  # variances, descending
    components: np.ndarray  # (2, W)


def pca2d(rows) -> PcaResult:
    """Top-2 principal axes of the centred rows; accepts a matrix or a snapshot."""
    X = rows.available if isinstance(rows, EmbeddingSnapshot) else np.asarray(rows, dtype=np.float64)
    m = len(X)
    if m < 3:
        raise ValueError("pca2d needs at least 3 rows")
    Xc = X - X.mean(axis=0)
    try:
        vals, vecs = np.linalg.eigh(Xc.T @ Xc / (m - 1))
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(str(e)) from e
    idx = np.argsort(vals)[::-1][:2]
    comps = vecs[:, idx].T.copy()
    for c in comps:
        nz = np.flatnonzero(np.abs(c) > 1e-12)
        if len(nz) and c[nz[0]] < 0:
            c *= -1
    explained = tuple(float(max(v, 0.0)) for v in vals[idx])
    return PcaResult(Xc @ comps.T, explained, comps)


@dataclass
class MatrixReport:
    matrix: np.ndarray
    labels: list[str] = field(default_factory=list)

    @property
    def columns(self):
        return ("row",) + tuple(self.labels or (str(i) for i in range(len(self.matrix))))

    def rows(self):
        labels = self.labels or [str(i) for i in range(len(self.matrix))]
        return [(lab, *map(float, r)) for lab, r in zip(labels, self.matrix)]

    def to_dict(self):
        return {"labels": list(self.labels), "matrix": self.matrix.tolist()}

    def plot(self):
        raise ValueError("matrix reports have no SVG rendering")


@dataclass
class PcaReport:
    result: PcaResult
    tags: list[str]

    columns = ("index", "tag", "pc1", "pc2")

    def rows(self):
        return [(i, tag, float(p[0]), float(p[1])) for i, (tag, p) in enumerate(zip(self.tags, self.result.projection))]

    def to_dict(self):
        return {"explained": list(self.result.explained), "tags": self.tags,
                "projection": self.result.projection.tolist()}

    def plot(self):
        P = self.result.projection
        series = []
        for tag in sorted(set(self.tags)):
            sel = [i for i, t in enumerate(self.tags) if t == tag]
            series.append(Series(tag, P[sel, 0].tolist(), P[sel, 1].tolist(), "scatter"))
        return Plot(series, xlabel="PC1", ylabel="PC2")


# ----------------------------------------------------------------------------
# emission
# ----------------------------------------------------------------------------

@dataclass
class Series:
    name: str
    x: Sequence[float]
    y: Sequence[float]
    kind: str = "scatter"  # scatter | line | both


@dataclass
class Plot:
    series: list[Series]
    logx: bool = False
    logy: bool = False
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    width: int = 640
    height: int = 420
    margin: int = 60


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.3f}"


class _Axes:
    def __init__(self, plot: Plot):
        xs = np.concatenate([np.asarray(s.x, float) for s in plot.series])
        ys = np.concatenate([np.asarray(s.y, float) for s in plot.series])
        if (plot.logx and np.any(xs <= 0)) or (plot.logy and np.any(ys <= 0)):
            raise ValueError("log axes need positive values")
        self.p = plot
        tx, ty = self.tx(xs), self.ty(ys)
        self.x0, self.x1 = self._span(tx)
        self.y0, self.y1 = self._span(ty)

    @staticmethod
    def _span(v):
        lo, hi = float(np.min(v)), float(np.max(v))
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.05 * (hi - lo)
        return lo - pad, hi + pad

    def tx(self, x):
        x = np.asarray(x, float)
        return np.log10(x) if self.p.logx else x

    def ty(self, y):
        y = np.asarray(y, float)
        return np.log10(y) if self.p.logy else y

    def px(self, x):
        p = self.p
        return p.margin + (self.tx(x) - self.x0) / (self.x1 - self.x0) * (p.width - 2 * p.margin)

    def py(self, y):
        p = self.p
        return p.height - p.margin - (self.ty(y) - self.y0) / (self.y1 - self.y0) * (p.height - 2 * p.margin)


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_svg(plot: Plot) -> str:
    ax = _Axes(plot)
    W, H, M = plot.width, plot.height, plot.margin
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<rect x="{M}" y="{M}" width="{W - 2 * M}" height="{H - 2 * M}" fill="none" stroke="black"/>']
    for lo, hi, side in ((ax.x0, ax.x1, "x"), (ax.y0, ax.y1, "y")):
        log = plot.logx if side == "x" else plot.logy
        for v in np.linspace(lo, hi, 5):
            label = f"{10 ** v:.3g}" if log else f"{v:.3g}"
            if side == "x":
                px = M + (v - lo) / (hi - lo) * (W - 2 * M)
                out.append(f'<text x="{_fmt(px)}" y="{H - M + 16}" font-size="10" text-anchor="middle">{label}</text>')
            else:
                py = H - M - (v - lo) / (hi - lo) * (H - 2 * M)
                out.append(f'<text x="{M - 6}" y="{_fmt(py + 3)}" font-size="10" text-anchor="end">{label}</text>')
    if plot.title:
        out.append(f'<text x="{W // 2}" y="{M // 2}" font-size="13" text-anchor="middle">{_esc(plot.title)}</text>')
    if plot.xlabel:
        out.append(f'<text x="{W // 2}" y="{H - 12}" font-size="11" text-anchor="middle">{_esc(plot.xlabel)}</text>')
    if plot.ylabel:
        out.append(f'<text x="14" y="{H // 2}" font-size="11" text-anchor="middle" '
                   f'transform="rotate(-90 14 {H // 2})">{_esc(plot.ylabel)}</text>')
    for i, s in enumerate(plot.series):
        color = PALETTE[i % len(PALETTE)]
        px, py = ax.px(s.x), ax.py(s.y)
        out.append(f'<g class="series" data-name="{_esc(s.name)}">')
        if s.kind in ("line", "both"):
            pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px, py))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        if s.kind in ("scatter", "both"):
            for a, b in zip(px, py):
                out.append(f'<circle class="marker" cx="{_fmt(a)}" cy="{_fmt(b)}" r="3" fill="{color}"/>')
        out.append("</g>")
        out.append(f'<text x="{W - M + 4}" y="{M + 12 * (i + 1)}" font-size="10" fill="{color}">{_esc(s.name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _csv_cell(v):
    return repr(v) if isinstance(v, float) else v


def to_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report.columns)
    for r in report.rows():
        w.writerow([_csv_cell(v) for v in r])
    return buf.getvalue()


def emit(report, fmt: str, path) -> Path:
    """Write ``report`` as csv, json or svg. Output is a pure function of the report."""
    path = Path(path)
    if fmt == "csv":
        text = to_csv(report)
    elif fmt == "json":
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    elif fmt == "svg":
        text = render_svg(report if isinstance(report, Plot) else report.plot())
    else:
        raise ValueError(f"unknown format {fmt!r}")
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path
