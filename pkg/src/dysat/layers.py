"""Structural and temporal self-attention and the full forward pass.

Shapes used throughout: a snapshot's node features are ``[N, D]``; the
structural block produces ``[N, f]`` per snapshot, stacked to ``[N, T, f]``
for the temporal block; ``model_forward`` returns ``[T, N, d]``.
"""

from __future__ import annotations

import io
import json
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import numeric as nm
from .graph import Snapshot, SnapshotSequence
from .numeric import Tensor

# Multiply-add counts of the attention kernels, keyed by block. Reset by callers.
FLOPS: Counter = Counter()


class ConfigError(ValueError):
    pass


@dataclass
class StructuralLayerParams:
    W: Tensor  # [D, F]
    a: Tensor  # [2F]; first half scores the neighbor, second half the target


@dataclass
class TemporalLayerParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor


@dataclass
class ModelConfig:
    input_dim: int
    structural_heads: list[int] = field(default_factory=lambda: [16])
    structural_sizes: list[int] = field(default_factory=lambda: [128])
    temporal_heads: list[int] = field(default_factory=lambda: [16])
    temporal_sizes: list[int] = field(default_factory=lambda: [128])
    final_dim: int = 128
    max_steps: int = 16
    window: int | None = None
    structural_dropout: float = 0.1
    temporal_dropout: float = 0.5
    leaky_slope: float = 0.2
    use_structural: bool = True
    use_temporal: bool = True
    dtype: str = "float64"

    def __post_init__(self) -> None:
        self.structural_heads = [int(h) for h in self.structural_heads]
        self.structural_sizes = [int(s) for s in self.structural_sizes]
        self.temporal_heads = [int(h) for h in self.temporal_heads]
        self.temporal_sizes = [int(s) for s in self.temporal_sizes]
        self.validate()

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        for kind, heads, sizes in (("structural", self.structural_heads, self.structural_sizes),
                                   ("temporal", self.temporal_heads, self.temporal_sizes)):
            if len(heads) != len(sizes):
                raise ConfigError(f"{kind}: {len(heads)} head counts for {len(sizes)} layer sizes")
            for i, (h, s) in enumerate(zip(heads, sizes)):
                if h < 1 or s < 1:
                    raise ConfigError(f"{kind} layer {i}: heads and size must be positive")
                if s % h:
                    raise ConfigError(f"{kind} layer {i}: size {s} not divisible by {h} heads")
        if not self.structural_sizes:
            raise ConfigError("need at least one structural layer size (it fixes the embedding width)")
        if self.use_temporal and not self.temporal_sizes:
            raise ConfigError("temporal block enabled but no temporal layers given")
        if self.final_dim < 1 or self.max_steps < 1:
            raise ConfigError("final_dim and max_steps must be positive")
        if self.window is not None and self.window < 0:
            raise ConfigError(f"window must be >= 0, got {self.window}")
        for name in ("structural_dropout", "temporal_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if not (self.use_structural or self.use_temporal):
            raise ConfigError("cannot remove both attention blocks")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype}")

    @property
    def structural_dim(self) -> int:
        """Width f of the structural output, position embeddings, and temporal input."""
        return self.structural_sizes[-1]

    @property
    def head_dims(self) -> tuple[list[int], list[int]]:
        return ([s // h for h, s in zip(self.structural_heads, self.structural_sizes)],
                [s // h for h, s in zip(self.temporal_heads, self.temporal_sizes)])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    structural: list[list[StructuralLayerParams]]
    temporal: list[list[TemporalLayerParams]]
    position: Tensor | None
    ff_W: Tensor
    ff_b: Tensor
    input_proj: Tensor | None = None  # stands in for the structural block when it is ablated

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.structural):
            for h, p in enumerate(layer):
                out[f"structural.{i}.{h}.W"] = p.W
                out[f"structural.{i}.{h}.a"] = p.a
        if self.input_proj is not None:
            out["input_proj"] = self.input_proj
        if self.position is not None:
            out["position"] = self.position
        for i, layer in enumerate(self.temporal):
            for h, p in enumerate(layer):
                out[f"temporal.{i}.{h}.W_q"] = p.W_q
                out[f"temporal.{i}.{h}.W_k"] = p.W_k
                out[f"temporal.{i}.{h}.W_v"] = p.W_v
        out["ff.W"] = self.ff_W
        out["ff.b"] = self.ff_b
        return out

    def decayed_names(self) -> set[str]:
        """Names that take L2 decay: weight matrices and attention vectors only."""
        return {k for k in self.named_tensors() if k not in ("position", "ff.b")}

    def copy(self) -> "ModelParams":
        clone = init_like(self)
        for (_, src), (_, dst) in zip(self.named_tensors().items(), clone.named_tensors().items()):
            dst.data = src.data.copy()
        return clone


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    dt = np.dtype(config.dtype)
    s_dims, t_dims = config.head_dims
    structural: list[list[StructuralLayerParams]] = []
    input_proj = None
    f = config.structural_dim
    if config.use_structural:
        d_in = config.input_dim
        for heads, F in zip(config.structural_heads, s_dims):
            structural.append([
                StructuralLayerParams(_glorot(rng, d_in, F, (d_in, F), dt),
                                      _glorot(rng, 2 * F, 1, (2 * F,), dt))
                for _ in range(heads)
            ])
            d_in = heads * F
    else:
        input_proj = _glorot(rng, config.input_dim, f, (config.input_dim, f), dt)

    temporal: list[list[TemporalLayerParams]] = []
    position = None
    d_in = f
    if config.use_temporal:
        position = _glorot(rng, config.max_steps, f, (config.max_steps, f), dt)
        for heads, F in zip(config.temporal_heads, t_dims):
            temporal.append([
                TemporalLayerParams(*(_glorot(rng, d_in, F, (d_in, F), dt) for _ in range(3)))
                for _ in range(heads)
            ])
            d_in = heads * F
    ff_W = _glorot(rng, d_in, config.final_dim, (d_in, config.final_dim), dt)
    ff_b = Tensor(np.zeros(config.final_dim, dtype=dt), requires_grad=True)
    return ModelParams(structural, temporal, position, ff_W, ff_b, input_proj)


def init_like(params: ModelParams) -> ModelParams:
    def z(t):
        return None if t is None else Tensor(np.zeros_like(t.data), requires_grad=True)

    return ModelParams(
        [[StructuralLayerParams(z(p.W), z(p.a)) for p in layer] for layer in params.structural],
        [[TemporalLayerParams(z(p.W_q), z(p.W_k), z(p.W_v)) for p in layer] for layer in params.temporal],
        z(params.position), z(params.ff_W), z(params.ff_b), z(params.input_proj),
    )


# attention layers -----------------------------------------------------------

def structural_attention_forward(
    s: Snapshot,
    X,
    params: StructuralLayerParams,
    slope: float = 0.2,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """One GAT-style head over the neighbors of every node (self-loop included).

    Logit for neighbor u of target v is ``leaky_relu(A_uv * a . [W x_u || W x_v])``;
    softmax runs over each target's neighborhood; the output is
    ``elu(sum_u alpha_uv W x_u)``. When ``weights_out`` is a list, the
    (neighbor, target, alpha) arrays are appended to it.
    """
    X = nm.as_tensor(X)
    if X.shape[1] != params.W.shape[0]:
        raise nm.DimensionError(f"features have {X.shape[1]} columns, W expects {params.W.shape[0]}")
    nbr, tgt, w = s.attention_edges
    F = params.W.shape[1]
    N = s.num_nodes
    XW = nm.matmul(X, params.W)
    a_nbr = nm.reshape(nm.index(params.a, slice(0, F)), (F, 1))
    a_tgt = nm.reshape(nm.index(params.a, slice(F, 2 * F)), (F, 1))
    score_nbr = nm.reshape(nm.matmul(XW, a_nbr), (N,))
    score_tgt = nm.reshape(nm.matmul(XW, a_tgt), (N,))
    raw = nm.mul(nm.add(nm.index(score_nbr, nbr), nm.index(score_tgt, tgt)), w.astype(XW.data.dtype))
    alpha = nm.segment_softmax(nm.leaky_relu(raw, slope), tgt, N)
    if weights_out is not None:
        weights_out.append((nbr, tgt, alpha.data.copy()))
    alpha = nm.dropout(alpha, dropout, rng)
    messages = nm.mul(nm.reshape(alpha, (-1, 1)), nm.index(XW, nbr))
    FLOPS["structural"] += N * X.shape[1] * F + len(nbr) * F
    return nm.elu(nm.segment_sum(messages, tgt, N))


def build_causal_mask(T: int, window: int | None = None) -> np.ndarray:
    """``M[i, j] = 0`` when ``j <= i`` (and ``i - j <= window`` if given), else ``-inf``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    allowed = j <= i
    if window is not None:
        allowed &= (i - j) <= window
    return np.where(allowed, 0.0, -np.inf)


def temporal_attention_forward(
    X,
    params: TemporalLayerParams,
    mask: np.ndarray,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """Scaled dot-product self-attention over one sequence ``[T, D']`` or a batch ``[N, T, D']``."""
    X = nm.as_tensor(X)
    T = X.shape[-2]
    if mask.shape != (T, T):
        raise nm.DimensionError(f"mask {mask.shape} does not match sequence length {T}")
    F = params.W_q.shape[1]
    Q = nm.matmul(X, params.W_q)
    K = nm.matmul(X, params.W_k)
    V = nm.matmul(X, params.W_v)
    axes = list(range(K.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    logits = nm.mul(nm.matmul(Q, nm.transpose(K, axes)), 1.0 / math.sqrt(F))
    beta = nm.masked_softmax(logits, mask.astype(logits.data.dtype))
    if weights_out is not None:
        weights_out.append(beta.data.copy())
    beta = nm.dropout(beta, dropout, rng)
    batch = int(np.prod(X.shape[:-2])) if X.ndim > 2 else 1
    FLOPS["temporal"] += 2 * batch * T * T * F
    FLOPS["temporal_projection"] += 3 * batch * T * X.shape[-1] * F
    return nm.matmul(beta, V)


def multi_head_forward(layer_fn: Callable[..., Tensor], heads, *args, **kwargs) -> Tensor:
    """Run ``layer_fn(*args, params=head, **kwargs)`` per head and concatenate features."""
    if not heads:
        raise ValueError("need at least one head")
    outs = []
    for h, p in enumerate(heads):
        sink = kwargs.get("weights_out")
        if sink is not None:
            sink.append(("head", h))
        outs.append(layer_fn(*args, params=p, **kwargs))
    return outs[0] if len(outs) == 1 else nm.concat(outs, axis=-1)


# blocks ---------------------------------------------------------------------

def structural_block(
    s: Snapshot,
    X,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """Node representations ``[N, f]`` for one snapshot."""
    if not config.use_structural:
        return nm.matmul(nm.as_tensor(X), params.input_proj)
    h = nm.as_tensor(X)
    rate = config.structural_dropout if training else 0.0
    for layer in params.structural:
        h = multi_head_forward(structural_attention_forward, layer, s, h, slope=config.leaky_slope,
                               dropout=rate, rng=rng if training else None, weights_out=weights_out)
    return h


def temporal_block(
    H: Tensor,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """Map stacked structural outputs ``[N, T, f]`` to final embeddings ``[N, T, d]``."""
    T = H.shape[1]
    if config.use_temporal:
        if T > config.max_steps:
            raise ConfigError(f"sequence of {T} steps exceeds max_steps={config.max_steps}")
        H = nm.add(H, nm.index(params.position, slice(0, T)))
        mask = build_causal_mask(T, config.window)
        rate = config.temporal_dropout if training else 0.0
        for layer in params.temporal:
            H = multi_head_forward(temporal_attention_forward, layer, H, mask=mask, dropout=rate,
                                   rng=rng if training else None, weights_out=weights_out)
    return nm.add(nm.matmul(H, params.ff_W), params.ff_b)


def model_forward(
    seq: SnapshotSequence,
    X,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Embeddings ``[T, N, d]``; step t depends only on snapshots up to t."""
    X = nm.as_tensor(np.asarray(X, dtype=config.dtype)) if not isinstance(X, Tensor) else X
    hs = [structural_block(s, X, params, config, training, rng) for s in seq]
    E = temporal_block(nm.stack(hs, axis=1), params, config, training, rng)
    return nm.transpose(E, (1, 0, 2))


@dataclass
class AttentionWeights:
    """Forward-pass attention weights; ``layer``/``head`` index into the model."""

    temporal: list[tuple[int, int, np.ndarray]]  # (layer, head, beta[N, T, T])
    structural: list[tuple[int, int, int, np.ndarray, np.ndarray, np.ndarray]]  # (t, layer, head, nbr, tgt, alpha)

    def temporal_rows(self):
        for layer, head, beta in self.temporal:
            N, T, _ = beta.shape
            for v in range(N):
                for i in range(T):
                    for j in range(i + 1):
                        yield layer, head, v, i, j, float(beta[v, i, j])

    def structural_rows(self):
        for t, layer, head, nbr, tgt, alpha in self.structural:
            for u, v, a in zip(nbr.tolist(), tgt.tolist(), alpha.tolist()):
                yield t, layer, head, u, v, a

    def write_csv(self, temporal_path, structural_path) -> None:
        with open(temporal_path, "w") as fh:
            fh.write("layer,head,node,i,j,beta\n")
            for row in self.temporal_rows():
                fh.write(",".join(map(str, row[:5])) + f",{row[5]!r}\n")
        with open(structural_path, "w") as fh:
            fh.write("snapshot,layer,head,u,v,alpha\n")
            for row in self.structural_rows():
                fh.write(",".join(map(str, row[:5])) + f",{row[5]!r}\n")


def _split_by_head(sink: list) -> list[tuple[int, int, object]]:
    """Turn the flat sink of ``("head", h)`` markers and payloads into (layer, head, payload)."""
    out = []
    layer = -1
    head = None
    for item in sink:
        if isinstance(item, tuple) and len(item) == 2 and item[0] == "head":
            head = item[1]
            if head == 0:
                layer += 1
        else:
            out.append((layer, head, item))
    return out


def export_attention_weights(params: ModelParams, config: ModelConfig, seq: SnapshotSequence, X) -> AttentionWeights:
    """Exact (dropout-free) attention weights of one forward pass."""
    X = nm.as_tensor(np.asarray(X, dtype=config.dtype))
    structural = []
    hs = []
    for t, s in enumerate(seq):
        sink: list = []
        hs.append(structural_block(s, X, params, config, weights_out=sink))
        for layer, head, (nbr, tgt, alpha) in _split_by_head(sink):
            structural.append((t, layer, head, nbr, tgt, alpha))
    sink = []
    temporal_block(nm.stack(hs, axis=1), params, config, weights_out=sink)
    temporal = [(layer, head, beta) for layer, head, beta in _split_by_head(sink)]
    return AttentionWeights(temporal, structural)


# checkpoints ----------------------------------------------------------------

_CK_MAGIC = b"DYSATCK1"


def save_checkpoint(path, params: ModelParams, config: ModelConfig, extra: dict | None = None) -> None:
    named = params.named_tensors()
    header = json.dumps({"config": config.to_dict(), "tensors": list(named), "extra": extra or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CK_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for t in named.values():
            nm.save_tensor(fh, t.data)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_CK_MAGIC)) != _CK_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        body = io.BytesIO(fh.read())
    config = ModelConfig.from_dict(header["config"])
    params = init_params(config, np.random.default_rng(0))
    named = params.named_tensors()
    if list(named) != header["tensors"]:
        raise ValueError(f"{path}: tensor layout does not match its config")
    for name, t in named.items():
        arr = nm.load_tensor(body)
        if arr.shape != t.shape:
            raise ValueError(f"{path}: {name} has shape {arr.shape}, config implies {t.shape}")
        t.data = arr.astype(config.dtype)
    return params, config, header.get("extra", {})
