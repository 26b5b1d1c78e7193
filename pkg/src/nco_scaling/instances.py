"""TSP instances: generators, exact/heuristic reference tours, TSPLIB input,
cost and gap metrics, and the packed binary dataset format."""

from __future__ import annotations

import csv
import math
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

KINDS = ("uniform", "explosion", "implosion", "cluster")
HELD_KARP_MAX_N = 16


class SizeError(ValueError):
    """Problem size is outside what the routine supports."""


class TourError(ValueError):
    """Order is not a permutation of 0..n-1."""


class TsplibError(ValueError):
    pass


@dataclass
class TspInstance:
    coords: np.ndarray
    ref_tour: np.ndarray | None = None
    ref_cost: float | None = None
    source: tuple = ("generated", "uniform", None)
    ref_kind: str | None = None  # "heldkarp" | "nn2opt" | "tsplib" | None
    raw_coords: np.ndarray | None = None  # TSPLIB original units
    name: str = ""

    @property
    def n(self) -> int:
        return len(self.coords)

    def with_reference(self, tour: "Tour", kind: str) -> "TspInstance":
        return TspInstance(self.coords, np.asarray(tour.order), tour.cost, self.source, kind,
                           self.raw_coords, self.name)


@dataclass
class Tour:
    order: np.ndarray
    cost: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)


# ----------------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------------

def _disk(rng):
    return rng.uniform(0, 1, size=2), rng.uniform(0.1, 0.3)


def generate(kind: str, n: int, seed) -> TspInstance:
    """One instance in the unit square. ``seed`` is anything ``default_rng`` accepts."""
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {KINDS}")
    if n < 4:
        raise SizeError("n must be >= 4")
    rng = np.random.default_rng(seed)
    if kind == "uniform":
        pts = rng.uniform(0, 1, size=(n, 2))
    elif kind == "explosion":
        pts = rng.uniform(0, 1, size=(n, 2))
        center, radius = _disk(rng)
        d = pts - center
        dist = np.linalg.norm(d, axis=1)
        inside = (dist < radius) & (dist > 0)
        noise = np.abs(rng.normal(0, 0.01, size=n))
        unit = d[inside] / dist[inside, None]
        pts[inside] = center + unit * (radius + noise[inside, None])
    elif kind == "implosion":
        pts = rng.uniform(0, 1, size=(n, 2))
        center, radius = _disk(rng)
        factor = rng.uniform(0.1, 0.5)
        inside = np.linalg.norm(pts - center, axis=1) < radius
        pts[inside] = center + factor * (pts[inside] - center)
    else:
        k = int(rng.integers(3, 9))
        centers = rng.uniform(0.2, 0.8, size=(k, 2))
        which = rng.integers(0, k, size=n)
        pts = centers[which] + rng.normal(0, 0.05, size=(n, 2))
    pts = np.clip(pts, 0.0, 1.0)
    return TspInstance(pts, source=("generated", kind, seed))


def generate_many(kind: str, n: int, count: int, seed: int) -> list[TspInstance]:
    """Instance ``i`` uses seed ``(seed, i)``, so any slice can be regenerated independently."""
    return [generate(kind, n, (seed, i)) for i in range(count)]


# ----------------------------------------------------------------------------
# costs
# ----------------------------------------------------------------------------

def _check_perm(order, n: int) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise TourError(f"not a permutation of 0..{n - 1}")
    return order


def tour_cost(instance_or_coords, order) -> float:
    coords = instance_or_coords.coords if isinstance(instance_or_coords, TspInstance) else np.asarray(instance_or_coords)
    order = _check_perm(order, len(coords))
    pts = coords[order]
    return float(np.linalg.norm(pts - np.roll(pts, -1, axis=0), axis=1).sum())


def batch_tour_costs(coords: np.ndarray, orders: np.ndarray) -> np.ndarray:
    """coords (B,n,2), orders (B,n) -> (B,) closed-tour lengths (no validation)."""
    pts = np.take_along_axis(coords, orders[..., None], axis=1)
    return np.linalg.norm(pts - np.roll(pts, -1, axis=1), axis=2).sum(axis=1)


def nint(x):
    return np.floor(np.asarray(x) + 0.5)


def tsplib_cost(raw_coords: np.ndarray, order) -> float:
    """EUC_2D length: every edge rounded to the nearest integer."""
    order = _check_perm(order, len(raw_coords))
    pts = np.asarray(raw_coords, dtype=np.float64)[order]
    return float(nint(np.linalg.norm(pts - np.roll(pts, -1, axis=0), axis=1)).sum())


def gap(cost: float, ref_cost: float) -> float:
    if not ref_cost > 0:
        raise ValueError("reference cost must be positive")
    return 100.0 * (cost - ref_cost) / ref_cost


def distance_matrix(coords: np.ndarray) -> np.ndarray:
    d = coords[..., :, None, :] - coords[..., None, :, :]
    return np.sqrt((d ** 2).sum(-1))


def canonical_order(order) -> np.ndarray:
    """Rotate so the tour starts at node 0."""
    order = np.asarray(order, dtype=np.int64)
    k = int(np.flatnonzero(order == 0)[0])
    return np.roll(order, -k)


# ----------------------------------------------------------------------------
# Held-Karp
# ----------------------------------------------------------------------------

def _held_karp_batch(dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact tours for a batch of equal-size instances. dist: (B,n,n).

    State (mask over nodes 1..n-1, last node j) holds the shortest path from
    node 0 through ``mask`` ending at ``j``. Layers are processed by popcount.
    """
    B, n, _ = dist.shape
    m = n - 1
    full = 1 << m
    dp = np.full((B, full, m), np.inf)
    parent = np.full((B, full, m), -1, dtype=np.int8)
    for j in range(m):
        dp[:, 1 << j, j] = dist[:, 0, j + 1]
    masks = np.arange(full)
    popcount = np.array([bin(x).count("1") for x in range(full)])
    sub = dist[:, 1:, 1:]  # (B, m, m)
    for size in range(2, m + 1):
        layer = masks[popcount == size]
        for j in range(m):
            bit = 1 << j
            ms = layer[(layer & bit) != 0]
            prev = ms ^ bit
            cand = dp[:, prev, :] + sub[:, None, :, j]  # (B, len(ms), m) over previous last node
            best = np.argmin(cand, axis=2)
            dp[:, ms, j] = np.take_along_axis(cand, best[..., None], axis=2)[..., 0]
            parent[:, ms, j] = best
    closing = dp[:, full - 1, :] + dist[:, 1:, 0]
    last = np.argmin(closing, axis=1)
    costs = closing[np.arange(B), last]
    tours = np.zeros((B, n), dtype=np.int64)
    for b in range(B):
        mask, j = full - 1, int(last[b])
        path = []
        while j >= 0:
            path.append(j + 1)
            pj = int(parent[b, mask, j])
            mask ^= 1 << j
            j = pj if mask else -1
        tours[b, 1:] = path[::-1]
    return tours, costs


def held_karp(instance: TspInstance) -> Tour:
    n = instance.n
    if n > HELD_KARP_MAX_N:
        raise SizeError(f"held_karp supports n <= {HELD_KARP_MAX_N}, got {n}")
    if n < 3:
        order = np.arange(n)
        return Tour(order, tour_cost(instance, order))
    tours, _ = _held_karp_batch(distance_matrix(instance.coords)[None])
    order = tours[0]
    return Tour(order, tour_cost(instance, order), {"method": "heldkarp"})


def held_karp_many(instances: Sequence[TspInstance], chunk: int = 512, threads: int = 1) -> list[Tour]:
    """Exact tours for many instances, grouped by size and processed in chunks."""
    for inst in instances:
        if inst.n > HELD_KARP_MAX_N:
            raise SizeError(f"held_karp supports n <= {HELD_KARP_MAX_N}, got {inst.n}")
    if instances:
        n = max(inst.n for inst in instances)
        # keep the DP table near 32 MB per chunk
        per = (1 << max(n - 1, 0)) * max(n - 1, 1)
        chunk = max(1, min(chunk, (1 << 22) // per))
    chunks = []
    for start in range(0, len(instances), chunk):
        group = instances[start:start + chunk]
        if len({g.n for g in group}) == 1 and group[0].n >= 3:
            chunks.append(group)
        else:
            chunks.extend([[g] for g in group])

    def solve(group):
        if group[0].n < 3:
            return [held_karp(group[0])]
        coords = np.stack([g.coords for g in group])
        tours, _ = _held_karp_batch(distance_matrix(coords))
        return [Tour(t, tour_cost(g, t), {"method": "heldkarp"}) for g, t in zip(group, tours)]

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(solve, chunks))
    else:
        results = [solve(c) for c in chunks]
    return [t for r in results for t in r]


# ----------------------------------------------------------------------------
# nearest neighbour + 2-opt
# ----------------------------------------------------------------------------

def nearest_neighbor(instance: TspInstance, start: int = 0) -> Tour:
    dist = distance_matrix(instance.coords)
    n = instance.n
    visited = np.zeros(n, dtype=bool)
    order = [start]
    visited[start] = True
    cur = start
    for _ in range(n - 1):
        row = np.where(visited, np.inf, dist[cur])
        cur = int(np.argmin(row))
        visited[cur] = True
        order.append(cur)
    order = np.array(order)
    return Tour(order, tour_cost(instance, order))


def two_opt(coords: np.ndarray, order, tol: float = 1e-12) -> np.ndarray:
    """Best-improvement 2-opt until no exchange shortens the tour by more than ``tol``."""
    dist = distance_matrix(coords)
    tour = np.array(order, dtype=np.int64)
    n = len(tour)
    if n < 4:
        return tour
    i_idx, j_idx = np.triu_indices(n, k=2)
    # (0, n-1) would swap the two edges at the seam, which is the same tour
    keep = ~((i_idx == 0) & (j_idx == n - 1))
    i_idx, j_idx = i_idx[keep], j_idx[keep]
    while True:
        a, b = tour[i_idx], tour[i_idx + 1]
        c, d = tour[j_idx], tour[(j_idx + 1) % n]
        delta = dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]
        k = int(np.argmin(delta))
        if delta[k] >= -tol:
            return tour
        i, j = i_idx[k], j_idx[k]
        tour[i + 1:j + 1] = tour[i + 1:j + 1][::-1]


def nn_two_opt(instance: TspInstance, seed: int = 0) -> Tour:
    """Nearest-neighbour tour from a seed-chosen start, then 2-opt to a local optimum."""
    if instance.n < 4:
        raise SizeError("n must be >= 4")
    start = int(np.random.default_rng(seed).integers(instance.n))
    nn = nearest_neighbor(instance, start)
    order = canonical_order(two_opt(instance.coords, nn.order))
    return Tour(order, tour_cost(instance, order), {"method": "nn2opt", "nn_cost": nn.cost})


# ----------------------------------------------------------------------------
# TSPLIB
# ----------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^\s*([A-Z_]+)\s*:?\s*(.*?)\s*$")


def parse_tsplib(text: str, name: str | None = None) -> TspInstance:
    """EUC_2D instances with a NODE_COORD_SECTION.

    Model coordinates are shifted to the origin and divided by the larger
    axis range (aspect preserved, inside [0,1]^2); ``raw_coords`` keep the
    file units for TSPLIB-convention costs.
    """
    header: dict[str, str] = {}
    coords: list[tuple[float, float]] = []
    lines = iter(text.splitlines())
    in_coords = False
    for line in lines:
        stripped = line.strip()
        if not stripped:
            continue
        if stripped == "EOF":
            break
        if stripped.startswith("NODE_COORD_SECTION"):
            in_coords = True
            continue
        if in_coords:
            parts = stripped.split()
            if len(parts) != 3:
                if _HEADER_RE.match(stripped) and parts[0].isupper():
                    in_coords = False
                    continue
                raise TsplibError(f"malformed coordinate line: {line!r}")
            try:
                coords.append((float(parts[1]), float(parts[2])))
            except ValueError as e:
                raise TsplibError(f"malformed coordinate line: {line!r}") from e
            continue
        m = _HEADER_RE.match(stripped)
        if not m or ":" not in stripped:
            raise TsplibError(f"malformed header line: {line!r}")
        header[m.group(1)] = m.group(2)
    if "DIMENSION" not in header:
        raise TsplibError("missing DIMENSION")
    ewt = header.get("EDGE_WEIGHT_TYPE", "").upper()
    if ewt != "EUC_2D":
        raise TsplibError(f"unsupported EDGE_WEIGHT_TYPE {ewt or '<missing>'}")
    try:
        dim = int(header["DIMENSION"])
    except ValueError as e:
        raise TsplibError("DIMENSION is not an integer") from e
    if not in_coords and not coords:
        raise TsplibError("missing NODE_COORD_SECTION")
    if len(coords) != dim:
        raise TsplibError(f"DIMENSION {dim} but {len(coords)} coordinates")
    raw = np.array(coords, dtype=np.float64)
    lo = raw.min(axis=0)
    span = float((raw.max(axis=0) - lo).max()) or 1.0
    norm = (raw - lo) / span
    label = name or header.get("NAME", "")
    return TspInstance(norm, source=("tsplib", label), raw_coords=raw, name=label)


def attach_tsplib_optimum(instance: TspInstance, opt_cost: float) -> TspInstance:
    """Use a published optimum (integer TSPLIB units) as the reference."""
    return TspInstance(instance.coords, None, float(opt_cost), instance.source, "tsplib",
                       instance.raw_coords, instance.name)


def instance_gap(instance: TspInstance, order) -> float:
    """Gap of ``order`` against the instance reference, in the reference's own units."""
    if instance.ref_cost is None:
        raise ValueError("instance has no reference cost")
    if instance.ref_kind == "tsplib":
        return gap(tsplib_cost(instance.raw_coords, order), instance.ref_cost)
    return gap(tour_cost(instance, order), instance.ref_cost)


# ----------------------------------------------------------------------------
# dataset file
# ----------------------------------------------------------------------------

DATASET_MAGIC = b"TSPDSET\x00"
DATASET_VERSION = 1
_HDR = struct.Struct("<IBIIQB")
_LABELS = {"none": 0, "heldkarp": 1, "nn2opt": 2}


@dataclass
class Dataset:
    """Equal-size instances as dense arrays; ``tours``/``costs`` present when labelled."""

    kind: str
    n: int
    seed: int
    coords: np.ndarray  # (count, n, 2)
    tours: np.ndarray | None = None  # (count, n) int
    costs: np.ndarray | None = None  # (count,)
    label: str = "none"

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def labelled(self) -> bool:
        return self.tours is not None

    def instance(self, i: int) -> TspInstance:
        inst = TspInstance(self.coords[i], source=("generated", self.kind, (self.seed, i)))
        if self.labelled:
            inst.ref_tour = self.tours[i]
            inst.ref_cost = float(self.costs[i])
            inst.ref_kind = self.label
        return inst

    def instances(self) -> list[TspInstance]:
        return [self.instance(i) for i in range(len(self))]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.kind, self.n, self.seed, self.coords[idx],
                       None if self.tours is None else self.tours[idx],
                       None if self.costs is None else self.costs[idx], self.label)


def label_instances(instances: Sequence[TspInstance], label: str, seed: int = 0,
                    threads: int = 1) -> list[Tour]:
    if label == "heldkarp":
        return held_karp_many(instances, threads=threads)
    if label == "nn2opt":
        def one(i):
            return nn_two_opt(instances[i], seed=seed + i)
        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                return list(ex.map(one, range(len(instances))))
        return [one(i) for i in range(len(instances))]
    raise ValueError(f"unknown label method {label!r}")


def build_dataset(kind: str, n: int, count: int, seed: int, label: str = "none",
                  threads: int = 1) -> Dataset:
    if label == "heldkarp" and n > HELD_KARP_MAX_N:
        raise SizeError(f"held_karp labels need n <= {HELD_KARP_MAX_N}")
    if label not in _LABELS:
        raise ValueError(f"unknown label method {label!r}")
    insts = generate_many(kind, n, count, seed)
    coords = np.stack([i.coords for i in insts]) if insts else np.zeros((0, n, 2))
    ds = Dataset(kind, n, seed, coords, label=label)
    if label != "none":
        tours = label_instances(insts, label, seed, threads)
        ds.tours = np.stack([t.order for t in tours])
        ds.costs = np.array([t.cost for t in tours])
    return ds


def save_dataset(path, ds: Dataset) -> None:
    """Layout (little-endian): magic(8) | u32 version | u8 kind | u32 n | u32 count |
    u64 seed | u8 label | f64 coords[count][n][2] | (if labelled) i32 tours[count][n] |
    f64 costs[count]."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(_HDR.pack(DATASET_VERSION, KINDS.index(ds.kind), ds.n, len(ds), ds.seed,
                           _LABELS[ds.label] if ds.labelled else 0))
        fh.write(np.ascontiguousarray(ds.coords, dtype="<f8").tobytes())
        if ds.labelled:
            fh.write(np.ascontiguousarray(ds.tours, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(ds.costs, dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:8] != DATASET_MAGIC:
        raise ValueError("not a dataset file")
    version, kind, n, count, seed, label = _HDR.unpack_from(data, 8)
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    off = 8 + _HDR.size
    coords = np.frombuffer(data, "<f8", count * n * 2, off).reshape(count, n, 2).astype(np.float64)
    off += coords.nbytes
    label_name = {v: k for k, v in _LABELS.items()}[label]
    ds = Dataset(KINDS[kind], n, seed, coords, label=label_name)
    if label:
        ds.tours = np.frombuffer(data, "<i4", count * n, off).reshape(count, n).astype(np.int64)
        off += count * n * 4
        ds.costs = np.frombuffer(data, "<f8", count, off).astype(np.float64)
        off += count * 8
    if off != len(data):
        raise ValueError("dataset file size does not match header")
    return ds


def write_tours_csv(path, rows: Sequence[dict]) -> None:
    """Columns: instance, tour (space-separated ids), cost, then any extra keys in first-row order."""
    if not rows:
        Path(path).write_text("instance,tour,cost\n")
        return
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([" ".join(map(str, r[k])) if k == "tour" else _fmt(r[k]) for k in keys])


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v
