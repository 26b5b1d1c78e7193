"""Supervised next-node training on partial optimal tours."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .instances import Dataset, Tour
from .model import ConstructionState, Model, gather_inputs, load_checkpoint, row_order, save_checkpoint, step_probs

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


class DataExhausted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 1024
    total_steps: int = 60_000
    lr0: float = 1.25e-4
    decay_gamma: float = 0.997
    decay_every: int = 100
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    seed: int = 0
    mode: str = "single_pass"  # or "epochs"
    epochs: int = 1
    min_subpath: int = 4
    checkpoint_every: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_gamma <= 1:
            raise ValueError("decay_gamma must lie in (0, 1]")
        if self.mode not in ("single_pass", "epochs"):
            raise ValueError("mode must be 'single_pass' or 'epochs'")
        if self.min_subpath < 2:
            raise ValueError("min_subpath must be >= 2")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small-batch CPU preset. The full-scale rate is far too slow for a
        few hundred steps, so the rate starts higher and decays every step."""
        base = dict(batch_size=64, total_steps=5000, lr0=5e-3, decay_gamma=0.995, decay_every=1)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def steps_for(self, count: int) -> int:
        if self.mode == "epochs":
            return self.epochs * (count // self.batch_size)
        return self.total_steps


def lr_at(step: int, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig()
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr0 * cfg.decay_gamma ** (step // cfg.decay_every)


# ----------------------------------------------------------------------------
# partial-solution sampling
# ----------------------------------------------------------------------------

def _orient(tour: np.ndarray, offset: int, reverse: bool) -> np.ndarray:
    seq = np.roll(tour, -offset)
    if reverse:
        seq = np.concatenate([seq[:1], seq[1:][::-1]])
    return seq


def sample_partial(tour, rng: np.random.Generator, min_len: int = 4,
                   length: int | None = None) -> tuple[ConstructionState, int]:
    """Cut a sub-path out of an optimal cycle.

    The cycle is rotated to a random offset and reversed with probability
    0.5. A sub-path of ``length`` nodes (uniform in ``min_len..n`` unless
    given) is taken from the front: all but its last node are visited, the
    first is the start, the second-to-last the current node, and the last
    node is the target.
    """
    order = np.asarray(tour.order if isinstance(tour, Tour) else tour)
    n = len(order)
    if n < 5:
        raise ValueError("tours need at least 5 nodes")
    if length is None:
        length = int(rng.integers(min_len, n + 1))
    seq = _orient(order, int(rng.integers(n)), bool(rng.integers(2)))
    visited = np.zeros(n, dtype=bool)
    visited[seq[:length - 1]] = True
    state = ConstructionState(int(seq[0]), int(seq[length - 2]), visited, length - 2)
    return state, int(seq[length - 1])


@dataclass
class Batch:
    start_xy: np.ndarray
    avail_xy: np.ndarray
    current_xy: np.ndarray
    target_pos: np.ndarray  # index into the available rows

    def __len__(self):
        return len(self.target_pos)


def make_batch(coords: np.ndarray, tours: np.ndarray, rng: np.random.Generator,
               min_len: int = 4, length: int | None = None) -> Batch:
    """Vectorised ``sample_partial`` over a batch sharing one sub-path length.

    One length per batch keeps every sample at the same sequence size; the
    length is still uniform over ``min_len..n`` unless pinned.
    """
    B, n = tours.shape
    if length is None:
        length = int(rng.integers(min_len, n + 1))
    elif not 2 <= length <= n:
        raise ValueError(f"length must be in [2, {n}], got {length}")
    offsets = rng.integers(n, size=B)
    flips = rng.integers(2, size=B).astype(bool)
    idx = (np.arange(n)[None, :] + offsets[:, None]) % n
    seqs = np.take_along_axis(tours, idx, axis=1)
    seqs[flips, 1:] = seqs[flips, 1:][:, ::-1]
    start = seqs[:, 0]
    current = seqs[:, length - 2]
    target = seqs[:, length - 1]
    avail = row_order(coords, seqs[:, length - 1:])
    target_pos = np.argmax(avail == target[:, None], axis=1)
    rows = np.arange(B)
    return Batch(coords[rows, start], np.take_along_axis(coords, avail[..., None], axis=1),
                 coords[rows, current], target_pos)


def batch_from_states(coords: np.ndarray, states: list[ConstructionState], targets) -> Batch:
    s_xy, a_xy, c_xy, avail = gather_inputs(coords, states)
    targets = np.asarray(targets)
    if np.any(~(avail == targets[:, None]).any(axis=1)):
        raise ValueError("target is not an available node")
    return Batch(s_xy, a_xy, c_xy, np.argmax(avail == targets[:, None], axis=1))


def loss(params, batch: Batch, n_scale: float = 1.0) -> ad.Tensor:
    """Mean negative log-likelihood of the target nodes."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    probs = step_probs(params, batch.start_xy, batch.avail_xy, batch.current_xy, n_scale)
    picked = ad.pick(probs, batch.target_pos + 1)
    if np.any(picked.values <= 0):
        raise NumericalError("target probability underflowed to zero")
    return ad.scale(ad.mean_all(ad.log(picked)), -1.0)


# ----------------------------------------------------------------------------
# optimiser
# ----------------------------------------------------------------------------

def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only (not biases, not ReZero scalars)."""
    return name.endswith(".W")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params) -> "OptimizerState":
        return cls({k: np.zeros_like(t.values) for k, t in params},
                   {k: np.zeros_like(t.values) for k, t in params})


def adamw_update(params, opt: OptimizerState, cfg: TrainConfig, lr: float) -> None:
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.values)) for k, t in params}
    if cfg.grad_clip is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    t = opt.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, tensor in params:
        if not tensor.requires_grad:
            continue
        g = grads[name]
        if cfg.weight_decay and decays(name):
            tensor.values = tensor.values * (1.0 - lr * cfg.weight_decay)
        opt.m[name] = cfg.beta1 * opt.m[name] + (1.0 - cfg.beta1) * g
        opt.v[name] = cfg.beta2 * opt.v[name] + (1.0 - cfg.beta2) * g * g
        denom = np.sqrt(opt.v[name] / bc2) + cfg.eps
        tensor.values = tensor.values - lr * (opt.m[name] / bc1) / denom
    opt.step = t


def train_step(model: Model, opt: OptimizerState, batch: Batch, cfg: TrainConfig) -> float:
    params = model.params
    params.zero_grad()
    value = loss(params, batch)
    lv = value.item()
    if not math.isfinite(lv):
        raise NumericalError(f"non-finite loss {lv} at step {opt.step}")
    ad.backward(value)
    adamw_update(params, opt, cfg, lr_at(opt.step, cfg))
    params.zero_grad()
    return lv


# ----------------------------------------------------------------------------
# driver
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    opt: OptimizerState
    curve: list[tuple[int, float, float]] = field(default_factory=list)


def batch_indices(cfg: TrainConfig, count: int, step: int) -> np.ndarray:
    B = cfg.batch_size
    if cfg.mode == "single_pass":
        if (step + 1) * B > count:
            raise DataExhausted(f"single-pass training needs {(step + 1) * B} instances, dataset has {count}")
        return np.arange(step * B, (step + 1) * B)
    per_epoch = count // B
    if per_epoch == 0:
        raise DataExhausted("dataset smaller than one batch")
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([cfg.seed, 1, epoch]).permutation(count)
    return perm[k * B:(k + 1) * B]


def assemble(cfg: TrainConfig, ds: Dataset, step: int) -> Batch:
    idx = batch_indices(cfg, len(ds), step)
    rng = np.random.default_rng([cfg.seed, 0, step])
    return make_batch(ds.coords[idx], ds.tours[idx], rng, cfg.min_subpath)


def save_training_state(path, model: Model, opt: OptimizerState, cfg: TrainConfig) -> None:
    arrays = {}
    for k in opt.m:
        arrays[f"m.{k}"] = opt.m[k]
        arrays[f"v.{k}"] = opt.v[k]
    save_checkpoint(path, model, dtype="f8",
                    extra={"step": opt.step, "train_config": cfg.to_dict()}, extra_arrays=arrays)


def load_training_state(path) -> tuple[Model, OptimizerState, TrainConfig]:
    model, extra, arrays = load_checkpoint(path, with_extra=True)
    names = [k for k, _ in model.params]
    opt = OptimizerState({k: arrays[f"m.{k}"].copy() for k in names},
                         {k: arrays[f"v.{k}"].copy() for k in names}, int(extra["step"]))
    return model, opt, TrainConfig.from_dict(extra["train_config"])


def run_training(cfg: TrainConfig, ds: Dataset, model: Model, out_dir=None,
                 opt: OptimizerState | None = None, stop_at: int | None = None,
                 threads: int = 1, log_every: int = 0) -> TrainResult:
    """Train from ``opt.step`` (0 for a fresh optimiser) up to the configured step count.

    With ``out_dir`` set, writes ``loss.csv``, periodic ``step_XXXXXX.ckpt``
    training states (64-bit, with optimiser moments) and ``final.ckpt`` (32-bit).
    """
    if not ds.labelled:
        raise ValueError("training needs a labelled dataset")
    if model.n_train != ds.n:
        model.n_train = ds.n
    opt = opt or OptimizerState.zeros(model.params)
    total = cfg.steps_for(len(ds))
    if cfg.mode == "single_pass" and total * cfg.batch_size > len(ds):
        raise DataExhausted(
            f"single-pass training needs {total * cfg.batch_size} instances, dataset has {len(ds)}")
    end = total if stop_at is None else min(total, stop_at)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model, opt)

    pool = ThreadPoolExecutor(1) if threads > 1 else None
    pending = pool.submit(assemble, cfg, ds, opt.step) if pool and opt.step < end else None
    try:
        while opt.step < end:
            step = opt.step
            if pending is not None:
                batch = pending.result()
                pending = pool.submit(assemble, cfg, ds, step + 1) if step + 1 < end else None
            else:
                batch = assemble(cfg, ds, step)
            lr = lr_at(step, cfg)
            value = train_step(model, opt, batch, cfg)
            result.curve.append((step, lr, value))
            if log_every and step % log_every == 0:
                log.info("step %d lr %.3g loss %.5f", step, lr, value)
            if out is not None and cfg.checkpoint_every and opt.step % cfg.checkpoint_every == 0:
                save_training_state(out / f"step_{opt.step:06d}.ckpt", model, opt, cfg)
    finally:
        if pool:
            pool.shutdown(wait=True)

    if out is not None:
        write_loss_csv(out / "loss.csv", result.curve)
        save_checkpoint(out / "final.ckpt", model, dtype="f4")
        save_training_state(out / "final_state.ckpt", model, opt, cfg)
        (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return result


def write_loss_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for step, lr, value in curve:
            w.writerow([step, repr(float(lr)), repr(float(value))])
