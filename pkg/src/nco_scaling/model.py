"""Decoder-only next-node predictor for Euclidean TSP.

Per construction step the input is the sequence
``[start, available nodes, current]``, each row a linear
projection of 2-D coordinates (separate maps for the two context rows).
The stack is ``depth`` blocks of gated multi-head attention and a ReLU FFN,
joined with ReZero residuals. A 1-unit head scores every row; context rows
are masked and the rest go through a softmax.

Available rows are ordered by coordinates (x, then y, then node id), so
relabelling the nodes of an instance leaves every floating-point operation
unchanged and the output permutes exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    width: int
    heads: int
    qkv_dim: int
    ffn_dim: int
    gated_attention: bool = True
    rezero: bool = True

    def __post_init__(self):
        for name in ("depth", "width", "heads", "qkv_dim", "ffn_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.heads * self.qkv_dim != self.width:
            raise ValueError(
                f"heads*qkv_dim must equal width ({self.heads}*{self.qkv_dim} != {self.width})")

    @property
    def canonical(self) -> bool:
        """True for the grid convention ffn_dim == 4*width with both mechanisms on."""
        return self.ffn_dim == 4 * self.width and self.gated_attention and self.rezero

    @classmethod
    def tiny(cls, depth: int = 2, width: int = 32, head_dim: int = 8, **kw) -> "ModelConfig":
        return cls(depth=depth, width=width, heads=width // head_dim, qkv_dim=head_dim,
                   ffn_dim=4 * width, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


LAYER_LINEARS = ("q", "k", "v", "o", "g")


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter name with its shape, in checkpoint order."""
    W, F = config.width, config.ffn_dim
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for emb in ("embed_all", "embed_start", "embed_current"):
        shapes += [(f"{emb}.W", (2, W)), (f"{emb}.b", (W,))]
    for i in range(config.depth):
        p = f"layers.{i}"
        for lin in LAYER_LINEARS:
            shapes += [(f"{p}.{lin}.W", (W, W)), (f"{p}.{lin}.b", (W,))]
        shapes += [(f"{p}.alpha1", ()), (f"{p}.alpha2", ())]
        shapes += [(f"{p}.ffn1.W", (W, F)), (f"{p}.ffn1.b", (F,)),
                   (f"{p}.ffn2.W", (F, W)), (f"{p}.ffn2.b", (W,))]
    shapes += [("head.W", (W, 1)), ("head.b", (1,))]
    return shapes


def per_layer_count(config: ModelConfig) -> int:
    W, F = config.width, config.ffn_dim
    return 5 * (W * W + W) + 2 + (W * F + F) + (F * W + W)


@dataclass(frozen=True)
class ParamCount:
    exact: int
    approx: float  # c * D * W^2
    c: float


# c in N ~ c*D*W^2, least squares over the 12-model grid (see scaling.fit_param_constant)
GRID_PARAM_CONSTANT = 13.0216


def param_count(config: ModelConfig, c: float = GRID_PARAM_CONSTANT) -> ParamCount:
    W = config.width
    exact = config.depth * per_layer_count(config) + 3 * (2 * W + W) + (W + 1)
    return ParamCount(exact=exact, approx=c * config.depth * W * W, c=c)


class ModelParams:
    """Named parameter tensors in a fixed order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        expected = [name for name, _ in param_shapes(config)]
        if list(tensors) != expected:
            raise ValueError("parameter names/order do not match config")
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    @property
    def total(self) -> int:
        return sum(t.values.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.values.copy(), requires_grad=t.requires_grad)
                                         for k, t in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([t.values.reshape(-1) for t in self.tensors.values()])

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases; ReZero scalars at 0.

        With ``rezero=False`` the scalars are fixed at 1 and excluded from grads.
        """
        rng = np.random.default_rng(seed)
        tensors: dict[str, Tensor] = {}
        fan_in = {}
        for name, shape in param_shapes(config):
            base = name.rsplit(".", 1)[0]
            if name.endswith(".W"):
                fan_in[base] = shape[0]
            if name.endswith("alpha1") or name.endswith("alpha2"):
                if config.rezero:
                    tensors[name] = Tensor(np.zeros(()), requires_grad=True)
                else:
                    tensors[name] = Tensor(np.ones(()), requires_grad=False)
                continue
            bound = 1.0 / math.sqrt(fan_in[base])
            tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        return cls(config, tensors)


# ----------------------------------------------------------------------------
# construction state
# ----------------------------------------------------------------------------

@dataclass
class ConstructionState:
    start: int
    current: int
    visited: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, n: int, start: int = 0) -> "ConstructionState":
        visited = np.zeros(n, dtype=bool)
        visited[start] = True
        return cls(start=start, current=start, visited=visited, t=0)

    @property
    def n(self) -> int:
        return len(self.visited)

    def available(self) -> np.ndarray:
        return np.flatnonzero(~self.visited)

    @property
    def done(self) -> bool:
        return bool(self.visited.all())

    def advance(self, node: int) -> "ConstructionState":
        if self.visited[node]:
            raise ValueError(f"node {node} already visited")
        visited = self.visited.copy()
        visited[node] = True
        return ConstructionState(self.start, int(node), visited, self.t + 1)


# ----------------------------------------------------------------------------
# forward pieces (batched over a leading axis B)
# ----------------------------------------------------------------------------

def _lin(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return ad.linear(x, params[f"{prefix}.W"], params[f"{prefix}.b"])


def embed_batch(params: ModelParams, start_xy: np.ndarray, avail_xy: np.ndarray,
                current_xy: np.ndarray) -> Tensor:
    """``start_xy``/``current_xy``: (B,2); ``avail_xy``: (B,a,2). Returns (B, a+2, W)."""
    if avail_xy.shape[1] < 1:
        raise ValueError("embedding needs at least one available node")
    s = _lin(params, "embed_start", Tensor(start_xy[:, None, :]))
    mid = _lin(params, "embed_all", Tensor(avail_xy))
    c = _lin(params, "embed_current", Tensor(current_xy[:, None, :]))
    return ad.concat([s, mid, c], axis=1)


def gated_attention_layer(X: Tensor, params: ModelParams, layer: int, n_scale: float = 1.0) -> Tensor:
    """Multi-head self-attention (no causal mask), optionally gated by sigmoid(X W_G + b_G).

    ``X`` is (s, W) or (B, s, W).
    """
    cfg = params.config
    squeeze = X.values.ndim == 2
    if squeeze:
        X = ad.reshape(X, (1,) + X.shape)
    B, s, W = X.shape
    h, dk = cfg.heads, cfg.qkv_dim
    p = f"layers.{layer}"

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, s, h, dk)), (0, 2, 1, 3))

    q = heads(_lin(params, f"{p}.q", X))
    k = heads(_lin(params, f"{p}.k", X))
    v = heads(_lin(params, f"{p}.v", X))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    factor = 1.0 / math.sqrt(dk)
    if n_scale != 1.0:
        factor = factor * n_scale
    attn = ad.softmax(ad.scale(scores, factor))
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, s, W))
    out = _lin(params, f"{p}.o", ctx)
    if cfg.gated_attention:
        gate = ad.sigmoid(_lin(params, f"{p}.g", X))
        out = ad.hadamard(out, gate)
    if squeeze:
        out = ad.reshape(out, (s, W))
    return out


def feed_forward(X: Tensor, params: ModelParams, layer: int) -> Tensor:
    p = f"layers.{layer}"
    return _lin(params, f"{p}.ffn2", ad.relu(_lin(params, f"{p}.ffn1", X)))


def decoder_block(X: Tensor, params: ModelParams, layer: int, n_scale: float = 1.0) -> Tensor:
    p = f"layers.{layer}"
    attn = gated_attention_layer(X, params, layer, n_scale)
    if params.config.rezero:
        H = ad.add(X, ad.hadamard(params[f"{p}.alpha1"], attn))
        return ad.add(H, ad.hadamard(params[f"{p}.alpha2"], feed_forward(H, params, layer)))
    H = ad.add(X, attn)
    return ad.add(H, feed_forward(H, params, layer))


def n_scale_for(n_train: int, n_test: int) -> float:
    if n_train < 2 or n_test < 2:
        raise ValueError("problem sizes must be >= 2")
    if n_test == n_train:
        return 1.0
    return math.log(n_test) / math.log(n_train)


def encode(params: ModelParams, X: Tensor, n_scale: float = 1.0) -> Tensor:
    for layer in range(params.config.depth):
        X = decoder_block(X, params, layer, n_scale)
    return X


def step_probs(params: ModelParams, start_xy: np.ndarray, avail_xy: np.ndarray,
               current_xy: np.ndarray, n_scale: float = 1.0,
               return_hidden: bool = False):
    """Batched next-node distribution over the ``s = a+2`` input rows.

    Returns a (B, s) probability tensor whose first and last columns are
    exactly zero; optionally also the final hidden states (B, s, W).
    """
    X = embed_batch(params, start_xy, avail_xy, current_xy)
    H = encode(params, X, n_scale)
    B, s, _ = H.shape
    logits = ad.reshape(_lin(params, "head", H), (B, s))
    mask = np.zeros((B, s), dtype=bool)
    mask[:, 0] = True
    mask[:, -1] = True
    probs = ad.masked_softmax(logits, mask)
    return (probs, H) if return_hidden else probs


def row_order(coords: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Reorder node ids (B,a) into model row order: by x, then y, then id."""
    xy = np.take_along_axis(coords, ids[..., None], axis=1)
    perm = np.lexsort((ids, xy[..., 1], xy[..., 0]), axis=-1)
    return np.take_along_axis(ids, perm, axis=1)


def gather_inputs(coords: np.ndarray, states: list[ConstructionState]):
    """Stack per-state inputs; every state must have the same number of available nodes.

    Returns (start_xy, avail_xy, current_xy, avail ids in row order).
    """
    starts = np.array([st.start for st in states])
    currents = np.array([st.current for st in states])
    if coords.ndim == 2:
        c = np.broadcast_to(coords, (len(states),) + coords.shape)
    else:
        c = coords
    avail = row_order(c, np.stack([st.available() for st in states]))
    rows = np.arange(len(states))
    return c[rows, starts], np.take_along_axis(c, avail[..., None], axis=1), c[rows, currents], avail


def embed(params: ModelParams, coords: np.ndarray, state: ConstructionState) -> Tensor:
    """Single-state embedding, shape (a+2, W)."""
    if state.done:
        raise ValueError("no available nodes")
    s_xy, a_xy, c_xy, _ = gather_inputs(np.asarray(coords, dtype=np.float64), [state])
    X = embed_batch(params, s_xy, a_xy, c_xy)
    return ad.reshape(X, X.shape[1:])


def forward(params: ModelParams, coords: np.ndarray, state: ConstructionState,
            n_train: int, n_test: int | None = None) -> np.ndarray:
    """Length-n probability vector for the next node (visited nodes get 0)."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if state.done:
        raise ValueError("terminal state: no available node")
    scale = n_scale_for(n_train, n if n_test is None else n_test)
    s_xy, a_xy, c_xy, avail = gather_inputs(coords, [state])
    probs = step_probs(params, s_xy, a_xy, c_xy, scale).values[0, 1:-1]
    out = np.zeros(n)
    out[avail[0]] = probs
    return out


# ----------------------------------------------------------------------------
# model bundle + checkpoints
# ----------------------------------------------------------------------------

@dataclass
class Model:
    config: ModelConfig
    params: ModelParams
    n_train: int = 100
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, n_train: int, seed: int = 0) -> "Model":
        return cls(config, ModelParams.init(config, seed), n_train)

    def probs(self, coords: np.ndarray, state: ConstructionState, n_test: int | None = None) -> np.ndarray:
        return forward(self.params, coords, state, self.n_train, n_test)


MAGIC = b"NCODECK\x00"
FORMAT_VERSION = 1


def save_checkpoint(path, model: Model, dtype: str = "f4", extra: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    """Binary checkpoint.

    Layout (little-endian): 8-byte magic, u32 version, u8 float width (4|8),
    u32 header length, UTF-8 JSON header {config, n_train, meta, extra,
    extra_arrays: [[name, shape], ...]}, then every parameter flattened in
    ``param_shapes`` order, then each extra array in header order.
    """
    if dtype not in ("f4", "f8"):
        raise ValueError("dtype must be 'f4' or 'f8'")
    extra_arrays = extra_arrays or {}
    header = json.dumps({
        "config": model.config.to_dict(),
        "n_train": model.n_train,
        "meta": model.meta,
        "extra": extra or {},
        "extra_arrays": [[k, list(v.shape)] for k, v in extra_arrays.items()],
    }, sort_keys=True).encode()
    width = 4 if dtype == "f4" else 8
    np_dtype = "<f4" if dtype == "f4" else "<f8"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IBI", FORMAT_VERSION, width, len(header)))
        fh.write(header)
        for _, t in model.params:
            fh.write(np.ascontiguousarray(t.values, dtype=np_dtype).tobytes())
        for v in extra_arrays.values():
            fh.write(np.ascontiguousarray(v, dtype=np_dtype).tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, with_extra: bool = False):
    data = Path(path).read_bytes()
    try:
        return _parse_checkpoint(data, with_extra)
    except (ValueError, KeyError, TypeError, struct.error, UnicodeDecodeError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {e}") from e


def _parse_checkpoint(data: bytes, with_extra: bool):
    if data[:8] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, width, hlen = struct.unpack_from("<IBI", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IBI")
    header = json.loads(data[off:off + hlen])
    off += hlen
    np_dtype = "<f4" if width == 4 else "<f8"
    config = ModelConfig.from_dict(header["config"])
    tensors = {}
    for name, shape in param_shapes(config):
        count = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(data, dtype=np_dtype, count=count, offset=off).astype(np.float64)
        off += count * width
        trainable = config.rezero or not name.endswith(("alpha1", "alpha2"))
        tensors[name] = Tensor(vals.reshape(shape), requires_grad=trainable)
    arrays = {}
    for name, shape in header.get("extra_arrays", []):
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype=np_dtype, count=count, offset=off).astype(np.float64).reshape(shape)
        off += count * width
    if off != len(data):
        raise CheckpointError("trailing or missing bytes in checkpoint")
    model = Model(config, ModelParams(config, tensors), header["n_train"], header.get("meta", {}))
    if with_extra:
        return model, header.get("extra", {}), arrays
    return model
