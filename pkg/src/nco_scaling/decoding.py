"""Tour construction with a trained model: greedy, sampling, beam search, RRC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .instances import TspInstance, Tour, batch_tour_costs, tour_cost
from .model import ConstructionState, Model, n_scale_for, row_order, step_probs


def _coords(instance) -> np.ndarray:
    return instance.coords if isinstance(instance, TspInstance) else np.asarray(instance, dtype=np.float64)


def _available_probs(model: Model, coords: np.ndarray, starts, currents, visited, n_scale):
    """Batched forward for states sharing one available count.

    coords (B,n,2); visited (B,n). Returns (avail ids (B,a), probs (B,a)) in
    model row order.
    """
    B = len(starts)
    a = int((~visited[0]).sum())
    avail = row_order(coords, np.nonzero(~visited)[1].reshape(B, a))
    rows = np.arange(B)
    probs = step_probs(model.params, coords[rows, starts],
                       np.take_along_axis(coords, avail[..., None], axis=1),
                       coords[rows, currents], n_scale)
    return avail, probs.values[:, 1:-1]


def argmax_lowest_id(avail: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Per row, the node with the highest probability; exact ties go to the lowest id."""
    best = probs == probs.max(axis=1, keepdims=True)
    return np.where(best, avail, np.iinfo(avail.dtype).max).min(axis=1)


def greedy_decode_many(model: Model, coords: np.ndarray, start: int = 0) -> np.ndarray:
    """Greedy tours for a stack of equal-size instances, coords (B,n,2) -> orders (B,n)."""
    coords = np.asarray(coords, dtype=np.float64)
    B, n, _ = coords.shape
    orders = np.zeros((B, n), dtype=np.int64)
    orders[:, 0] = start
    if n < 2:
        return orders
    scale = n_scale_for(model.n_train, n)
    visited = np.zeros((B, n), dtype=bool)
    visited[:, start] = True
    starts = np.full(B, start)
    currents = starts.copy()
    rows = np.arange(B)
    for t in range(1, n):
        avail, probs = _available_probs(model, coords, starts, currents, visited, scale)
        nxt = argmax_lowest_id(avail, probs)
        orders[:, t] = nxt
        visited[rows, nxt] = True
        currents = nxt
    return orders


def greedy_decode(model: Model, instance, start: int = 0) -> Tour:
    coords = _coords(instance)
    order = greedy_decode_many(model, coords[None], start)[0]
    return Tour(order, tour_cost(coords, order))


def sample_decode(model: Model, instance, rng: np.random.Generator, start: int = 0) -> Tour:
    coords = _coords(instance)
    n = len(coords)
    scale = n_scale_for(model.n_train, n)
    state = ConstructionState.initial(n, start)
    order = [start]
    while not state.done:
        avail, probs = _available_probs(model, coords[None], [state.start], [state.current],
                                        state.visited[None], scale)
        p = probs[0] / probs[0].sum()
        node = int(avail[0, rng.choice(len(p), p=p)])
        order.append(node)
        state = state.advance(node)
    order = np.array(order)
    return Tour(order, tour_cost(coords, order))


# ----------------------------------------------------------------------------
# beam search
# ----------------------------------------------------------------------------

@dataclass
class BeamEntry:
    state: ConstructionState
    sequence: list[int]
    score: float = 0.0
    cost_so_far: float = 0.0


def beam_decode(model: Model, instance, beam: int, start: int = 0) -> Tour:
    """Keep the ``beam`` best partial tours by summed log-probability; return the
    cheapest completed tour in the final beam."""
    if beam < 1:
        raise ValueError("beam width must be >= 1")
    coords = _coords(instance)
    n = len(coords)
    scale = n_scale_for(model.n_train, n)
    beams = [BeamEntry(ConstructionState.initial(n, start), [start])]
    for _ in range(n - 1):
        avail, probs = _available_probs(
            model, np.broadcast_to(coords, (len(beams),) + coords.shape),
            np.array([b.state.start for b in beams]), np.array([b.state.current for b in beams]),
            np.stack([b.state.visited for b in beams]), scale)
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        cands = []
        for i, entry in enumerate(beams):
            for j in range(avail.shape[1]):
                # the raw probability breaks ties that the summed log-score may have collapsed
                cands.append((-(entry.score + logp[i, j]), -probs[i, j], i, int(avail[i, j])))
        cands.sort()
        nxt = []
        for neg_score, _, i, node in cands[:beam]:
            parent = beams[i]
            step = float(np.linalg.norm(coords[parent.state.current] - coords[node]))
            nxt.append(BeamEntry(parent.state.advance(node), parent.sequence + [node],
                                 -neg_score, parent.cost_so_far + step))
        beams = nxt
    best = None
    for entry in beams:
        order = np.array(entry.sequence)
        cost = tour_cost(coords, order)
        if best is None or cost < best.cost:
            best = Tour(order, cost, {"score": entry.score})
    return best


# ----------------------------------------------------------------------------
# random reconstruction
# ----------------------------------------------------------------------------

@dataclass
class RrcConfig:
    iterations: int = 100
    segment_min: int = 4
    segment_max_frac: float = 0.5
    inner_decoder: str = "greedy"  # or "sample"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.segment_min < 4:
            raise ValueError("segment_min must be >= 4")
        if self.inner_decoder not in ("greedy", "sample"):
            raise ValueError("inner_decoder must be 'greedy' or 'sample'")

    def segment_max(self, n: int) -> int:
        return min(n, max(self.segment_min, int(self.segment_max_frac * n)))


def reconstruct_path(model: Model, coords: np.ndarray, first: int, last: int, interior,
                     rng: np.random.Generator | None = None, sample: bool = False) -> list[int]:
    """Order ``interior`` nodes into a path from ``first`` to ``last``.

    ``last`` plays the start-node role (the point the path must return to)
    and ``first`` the current node, mirroring the training states.
    """
    n = len(coords)
    scale = n_scale_for(model.n_train, n)
    visited = np.ones(n, dtype=bool)
    visited[list(interior)] = False
    state = ConstructionState(int(last), int(first), visited, int(visited.sum()) - 1)
    path = []
    while not state.done:
        avail, probs = _available_probs(model, coords[None], [state.start], [state.current],
                                        state.visited[None], scale)
        if sample:
            p = probs[0] / probs[0].sum()
            node = int(avail[0, rng.choice(len(p), p=p)])
        else:
            node = int(argmax_lowest_id(avail, probs)[0])
        path.append(node)
        state = state.advance(node)
    return path


def rrc(model: Model, instance, initial: Tour, cfg: RrcConfig) -> Tour:
    """Destroy a random contiguous segment, rebuild it with the model, keep strict improvements.

    ``meta['trace']`` holds the incumbent cost after every iteration.
    """
    coords = _coords(instance)
    n = len(coords)
    best = np.asarray(initial.order, dtype=np.int64).copy()
    best_cost = tour_cost(coords, best)
    trace = []
    if n < cfg.segment_min:
        return Tour(best, best_cost, {"trace": [best_cost] * cfg.iterations, "accepted": 0})
    rng = np.random.default_rng(cfg.seed)
    accepted = 0
    for _ in range(cfg.iterations):
        length = int(rng.integers(cfg.segment_min, cfg.segment_max(n) + 1))
        seq = np.roll(best, -int(rng.integers(n)))
        if rng.integers(2):
            seq = np.concatenate([seq[:1], seq[1:][::-1]])
        first, last = int(seq[0]), int(seq[length - 1])
        interior = seq[1:length - 1]
        path = reconstruct_path(model, coords, first, last, interior, rng,
                                cfg.inner_decoder == "sample")
        cand = np.concatenate([[first], path, [last], seq[length:]]).astype(np.int64)
        cost = tour_cost(coords, cand)
        if cost < best_cost:
            best, best_cost = cand, cost
            accepted += 1
        trace.append(best_cost)
    # rotate back so the tour begins where the initial one did
    head = int(np.asarray(initial.order)[0])
    best = np.roll(best, -int(np.flatnonzero(best == head)[0]))
    return Tour(best, best_cost, {"trace": trace, "accepted": accepted})


# ----------------------------------------------------------------------------
# dispatch
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class DecodeSpec:
    strategy: str  # greedy | beam | rrc | sample
    k: int = 1
    seed: int = 0

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "DecodeSpec":
        name, _, arg = text.partition(":")
        if name == "greedy" and not arg:
            return cls("greedy", 1, seed)
        if name in ("beam", "rrc") and arg.isdigit():
            return cls(name, int(arg), seed)
        if name == "sample" and not arg:
            return cls("sample", 1, seed)
        raise ValueError(f"bad decode spec {text!r}; use greedy, sample, beam:K or rrc:K")

    @property
    def beam_factor(self) -> int:
        return self.k if self.strategy == "beam" else 1

    def __str__(self) -> str:
        return self.strategy if self.strategy in ("greedy", "sample") else f"{self.strategy}:{self.k}"


def decode(model: Model, instance, spec: DecodeSpec, index: int = 0) -> Tour:
    if spec.strategy == "greedy":
        return greedy_decode(model, instance)
    if spec.strategy == "beam":
        return beam_decode(model, instance, spec.k)
    if spec.strategy == "sample":
        return sample_decode(model, instance, np.random.default_rng([spec.seed, index]))
    init = greedy_decode(model, instance)
    return rrc(model, instance, init, RrcConfig(iterations=spec.k, seed=spec.seed + index))


def decode_many(model: Model, coords: np.ndarray, spec: DecodeSpec, threads: int = 1) -> np.ndarray:
    """Orders for a stack of equal-size instances, (B,n,2) -> (B,n)."""
    if spec.strategy == "greedy":
        return greedy_decode_many(model, coords)
    jobs = range(len(coords))

    def one(i):
        return decode(model, coords[i], spec, i).order

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as ex:
            return np.stack(list(ex.map(one, jobs)))
    return np.stack([one(i) for i in jobs])


__all__ = [
    "BeamEntry", "DecodeSpec", "RrcConfig", "beam_decode", "batch_tour_costs", "decode",
    "decode_many", "greedy_decode", "greedy_decode_many", "reconstruct_path", "rrc", "sample_decode",
]
