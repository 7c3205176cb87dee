"""Graph-context objective, Adam, the minibatch training loop, and incremental training."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import layers
from . import numeric as nm
from .evaluation import LinkExampleSet, auc
from .graph import Snapshot, SnapshotSequence, one_hot_features
from .layers import ModelConfig, ModelParams
from .numeric import Tape, Tensor
from .sampling import SamplerConfig, WalkCorpus, build_corpus

LOG_FLOOR = math.log(1e-12)


class TrainingError(RuntimeError):
    pass


class NonFiniteGradientError(TrainingError):
    pass


class EmptyCorpusError(TrainingError):
    pass


class MissingHistoryError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    w_n: float = 1.0
    l2: float = 5e-4
    batch_nodes: int = 256
    max_epochs: int = 200
    seed: int = 0
    selection: str = "auc"  # "auc" (validation links) or "loss" (training loss)
    resample_walks: bool = False

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.w_n < 0 or self.l2 < 0:
            raise ValueError("learning_rate must be positive; w_n and l2 non-negative")
        if self.batch_nodes < 1 or self.max_epochs < 1:
            raise ValueError("batch_nodes and max_epochs must be positive")
        if self.selection not in ("auc", "loss"):
            raise ValueError(f"selection must be 'auc' or 'loss', got {self.selection!r}")


def _stream(seed: int, *parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *parts]))


# objective ------------------------------------------------------------------

def negative_pairs(corpus: WalkCorpus, t: int, k: int, rng: np.random.Generator,
                   sources: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated negatives for step ``t``: k draws from P_n per positive, as unique (v, u') with counts.

    The per-source multinomial is the count vector of those i.i.d. draws.
    """
    dist = corpus.neg_dists[t]
    totals = corpus.source_totals(t)
    if sources is not None:
        mask = np.zeros(corpus.num_nodes, dtype=bool)
        mask[sources] = True
        totals = np.where(mask, totals, 0)
    src = np.flatnonzero(totals)
    if dist is None or len(src) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    counts = rng.multinomial(totals[src] * k, dist)
    rows, cols = np.nonzero(counts)
    return np.stack([src[rows], cols], axis=1), counts[rows, cols]


def _pair_scores(E_t: Tensor, pairs: np.ndarray) -> Tensor:
    return nm.sum(nm.mul(nm.index(E_t, pairs[:, 0]), nm.index(E_t, pairs[:, 1])), axis=1)


def context_loss(
    embeddings: Tensor,
    corpus: WalkCorpus,
    w_n: float,
    rng: np.random.Generator | None = None,
    negatives: list | None = None,
    k: int = 10,
    batch: np.ndarray | None = None,
    steps: list[int] | None = None,
) -> Tensor:
    """Sum over steps and positive pairs (v, u) of
    ``-log s(<e_u, e_v>) - w_n * sum_negs log(1 - s(<e_u', e_v>))``.

    ``negatives`` pins the negatives: per step, an ``[m, 2]`` array of
    (v, u') rows (repeats allowed). Otherwise ``k`` per positive are drawn
    with ``rng``. ``batch`` restricts the sum to source nodes in it.
    ``steps`` maps corpus index to embedding row (default identity).
    Logs are floored at log(1e-12).
    """
    T = len(corpus)
    steps = list(range(T)) if steps is None else steps
    total: Tensor | None = None
    for i in range(T):
        E_t = nm.index(embeddings, steps[i])
        pairs, counts = corpus.pairs[i], corpus.counts[i]
        if batch is not None and len(pairs):
            keep = np.isin(pairs[:, 0], batch)
            pairs, counts = pairs[keep], counts[keep]
        if len(pairs) == 0:
            continue
        pos = nm.maximum(nm.log_sigmoid(_pair_scores(E_t, pairs)), LOG_FLOOR)
        term = nm.neg(nm.sum(nm.mul(pos, counts.astype(E_t.data.dtype))))
        if w_n > 0:
            if negatives is not None:
                neg = np.asarray(negatives[i], dtype=np.int64).reshape(-1, 2)
                if batch is not None:
                    neg = neg[np.isin(neg[:, 0], batch)]
                n_pairs, n_counts = (np.unique(neg, axis=0, return_counts=True) if len(neg)
                                     else (neg, np.zeros(0, dtype=np.int64)))
            else:
                if rng is None:
                    raise ValueError("context_loss needs rng or explicit negatives")
                n_pairs, n_counts = negative_pairs(corpus, i, k, rng, batch)
            if len(n_pairs):
                lneg = nm.maximum(nm.log_sigmoid(nm.neg(_pair_scores(E_t, n_pairs))), LOG_FLOOR)
                term = nm.sub(term, nm.mul(nm.sum(nm.mul(lneg, n_counts.astype(E_t.data.dtype))), w_n))
        total = term if total is None else nm.add(total, term)
    if total is None:
        return Tensor(np.zeros(()))
    return total


# optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              l2: float = 0.0, decayed: set[str] | None = None) -> None:
    """Bias-corrected Adam update in place; ``l2 * theta`` is added to decayed gradients first."""
    bad = [name for name, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in {', '.join(bad)} at step {state.step + 1}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if l2 and (decayed is None or name in decayed):
            g = g + l2 * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# training loop --------------------------------------------------------------

@dataclass
class FitResult:
    params: ModelParams
    config: ModelConfig
    history: list[dict]
    best_epoch: int

    def history_csv(self) -> str:
        lines = ["epoch,loss,val_auc"]
        for h in self.history:
            val = "" if h["val_auc"] is None else repr(h["val_auc"])
            lines.append(f"{h['epoch']},{h['loss']!r},{val}")
        return "\n".join(lines) + "\n"


def _score_validation(E_last: np.ndarray, val: LinkExampleSet) -> float:
    scores = np.sum(E_last[val.pairs[:, 0]] * E_last[val.pairs[:, 1]], axis=1)
    return auc(scores, val.labels)


def _train(
    forward: Callable[[bool, np.random.Generator | None], Tensor],
    params: ModelParams,
    config: ModelConfig,
    corpus_fn: Callable[[int], WalkCorpus],
    loss_steps: list[int],
    num_nodes: int,
    train_cfg: TrainConfig,
    k: int,
    val: LinkExampleSet | None,
) -> tuple[ModelParams, list[dict], int]:
    named = params.named_tensors()
    decayed = params.decayed_names()
    state = AdamState()
    history: list[dict] = []
    best: tuple[float, int, ModelParams] | None = None
    corpus = corpus_fn(0)
    for epoch in range(train_cfg.max_epochs):
        if train_cfg.resample_walks and epoch:
            corpus = corpus_fn(epoch)
        order = _stream(train_cfg.seed, epoch, 3).permutation(num_nodes)
        neg_rng = _stream(train_cfg.seed, epoch, 1)
        drop_rng = _stream(train_cfg.seed, epoch, 2)
        epoch_loss = 0.0
        for b in range(0, num_nodes, train_cfg.batch_nodes):
            batch = np.sort(order[b: b + train_cfg.batch_nodes])
            for p in named.values():
                p.grad = None
            with Tape() as tape:
                E = forward(True, drop_rng)
                loss = context_loss(E, corpus, train_cfg.w_n, rng=neg_rng, k=k, batch=batch, steps=loss_steps)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            epoch_loss += value
            if not loss.requires_grad:
                continue
            tape.backward(loss)
            adam_step(named, {n: p.grad for n, p in named.items()}, state,
                      train_cfg.learning_rate, train_cfg.l2, decayed)
        val_auc = None
        if val is not None and not val.empty and len(np.unique(val.labels)) == 2:
            E_eval = forward(False, None).data
            val_auc = _score_validation(E_eval[-1], val)
        history.append({"epoch": epoch, "loss": epoch_loss, "val_auc": val_auc})
        use_auc = train_cfg.selection == "auc" and val_auc is not None
        score = val_auc if use_auc else -epoch_loss
        if best is None or score > best[0]:
            best = (score, epoch, params.copy())
    assert best is not None
    return best[2], history, best[1]


def fit(
    seq: SnapshotSequence,
    X: np.ndarray | None,
    config: ModelConfig,
    train_cfg: TrainConfig,
    sampler_cfg: SamplerConfig | None = None,
    val: LinkExampleSet | None = None,
    corpus: WalkCorpus | None = None,
) -> FitResult:
    """Train on every snapshot of ``seq`` and keep the best epoch.

    Best means highest validation AUC when ``val`` is given and selection is
    "auc"; otherwise lowest training loss.
    """
    sampler_cfg = sampler_cfg or SamplerConfig(seed=train_cfg.seed)
    X = one_hot_features(seq.num_nodes) if X is None else X
    if len(seq) > config.max_steps and config.use_temporal:
        raise layers.ConfigError(f"{len(seq)} snapshots exceed max_steps={config.max_steps}")
    if corpus is None:
        corpus = build_corpus(seq, sampler_cfg)
    if sum(corpus.num_positives(t) for t in range(len(corpus))) == 0:
        raise EmptyCorpusError("no positive pairs: every training snapshot is edgeless")
    Xt = Tensor(np.asarray(X, dtype=config.dtype))
    params = layers.init_params(config, _stream(train_cfg.seed, 0))

    def forward(training, rng):
        return layers.model_forward(seq, Xt, params, config, training=training, rng=rng)

    def corpus_fn(epoch):
        if epoch == 0:
            return corpus
        return build_corpus(seq, replace(sampler_cfg, seed=sampler_cfg.seed + epoch))

    best, history, best_epoch = _train(forward, params, config, corpus_fn, list(range(len(seq))),
                                       seq.num_nodes, train_cfg, sampler_cfg.negatives_per_positive, val)
    return FitResult(best, config, history, best_epoch)


def embed(seq: SnapshotSequence, X: np.ndarray | None, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Dropout-free embeddings ``[T, N, d]``."""
    X = one_hot_features(seq.num_nodes) if X is None else X
    return layers.model_forward(seq, np.asarray(X, dtype=config.dtype), params, config).data


# incremental ----------------------------------------------------------------

class RepresentationStore:
    """Saved structural outputs ``h^t`` (``[N, f]``) per step, optionally mirrored to a directory."""

    def __init__(self, directory: str | os.PathLike | None = None):
        self.directory = Path(directory) if directory is not None else None
        self._mem: dict[int, np.ndarray] = {}
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            for f in sorted(self.directory.glob("h_*.bin")):
                with open(f, "rb") as fh:
                    self._mem[int(f.stem[2:])] = nm.load_tensor(fh)

    def save(self, t: int, h: np.ndarray) -> None:
        arr = np.array(h, dtype=np.float64, copy=True)
        self._mem[t] = arr
        if self.directory is not None:
            with open(self.directory / f"h_{t:05d}.bin", "wb") as fh:
                nm.save_tensor(fh, arr)

    def load(self, t: int) -> np.ndarray:
        if t not in self._mem:
            raise MissingHistoryError(f"no stored representation for step {t}")
        return self._mem[t].copy()

    def steps(self) -> list[int]:
        return sorted(self._mem)

    def missing(self, upto: int) -> list[int]:
        return [t for t in range(upto) if t not in self._mem]

    def __len__(self) -> int:
        return len(self._mem)


def incsat_config(config: ModelConfig) -> ModelConfig:
    """Dropout 0.4 in both attention blocks, the incremental-mode default."""
    return replace(config, structural_dropout=0.4, temporal_dropout=0.4)


@dataclass
class IncrementalResult:
    embeddings: np.ndarray  # [N, d] at the new step
    params: ModelParams
    history: list[dict]
    best_epoch: int


def incremental_fit(
    snapshot: Snapshot,
    store: RepresentationStore,
    config: ModelConfig,
    train_cfg: TrainConfig,
    step: int | None = None,
    X: np.ndarray | None = None,
    sampler_cfg: SamplerConfig | None = None,
    val: LinkExampleSet | None = None,
) -> IncrementalResult:
    """Train at ``step`` seeing only the newest snapshot and stored ``h^0..h^{step-1}``.

    The structural block runs on ``snapshot`` alone; stored rows enter the
    temporal block as constants. The loss uses walks on ``snapshot`` only.
    The new ``h^step`` is appended to the store.
    """
    step = len(store) if step is None else step
    missing = store.missing(step)
    if missing:
        raise MissingHistoryError(f"store lacks steps {missing} needed for step {step}")
    sampler_cfg = sampler_cfg or SamplerConfig(seed=train_cfg.seed)
    N = snapshot.num_nodes
    X = one_hot_features(N) if X is None else X
    first = 0 if config.window is None else max(0, step - config.window)
    history_rows = [store.load(t).astype(config.dtype) for t in range(first, step)]
    if config.use_temporal and len(history_rows) + 1 > config.max_steps:
        raise layers.ConfigError(f"{len(history_rows) + 1} steps exceed max_steps={config.max_steps}")
    hist = Tensor(np.stack(history_rows, axis=1)) if history_rows else None
    Xt = Tensor(np.asarray(X, dtype=config.dtype))
    params = layers.init_params(config, _stream(train_cfg.seed, 0))
    corpus = build_corpus([snapshot], sampler_cfg, steps=[step])
    if corpus.num_positives(0) == 0:
        raise EmptyCorpusError(f"snapshot {step} has no edges to sample walks from")
    last = len(history_rows)

    def forward(training, rng):
        h = layers.structural_block(snapshot, Xt, params, config, training, rng)
        H = nm.stack([h], axis=1)
        if hist is not None:
            H = nm.concat([hist, H], axis=1)
        return nm.transpose(layers.temporal_block(H, params, config, training, rng), (1, 0, 2))

    def corpus_fn(epoch):
        if epoch == 0:
            return corpus
        return build_corpus([snapshot], replace(sampler_cfg, seed=sampler_cfg.seed + epoch), steps=[step])

    best, history, best_epoch = _train(forward, params, config, corpus_fn, [last], N, train_cfg,
                                       sampler_cfg.negatives_per_positive, val)
    h_new = layers.structural_block(snapshot, Xt, best, config).data
    store.save(step, h_new)
    emb = _incremental_embed(snapshot, Xt, best, config, hist)
    return IncrementalResult(emb, best, history, best_epoch)


def _incremental_embed(snapshot, Xt, params, config, hist) -> np.ndarray:
    h = layers.structural_block(snapshot, Xt, params, config)
    H = nm.stack([h], axis=1)
    if hist is not None:
        H = nm.concat([hist, H], axis=1)
    return layers.temporal_block(H, params, config).data[:, -1, :]


# evaluation adapter ---------------------------------------------------------

@dataclass
class DySATTrainer:
    """Callable for :func:`dysat.evaluation.evaluate`: trains on the history and returns ``e^t``."""

    config: ModelConfig
    train_cfg: TrainConfig
    sampler_cfg: SamplerConfig = field(default_factory=SamplerConfig)
    X: np.ndarray | None = None

    def __call__(self, train_seq: SnapshotSequence, val: LinkExampleSet | None, seed: int) -> np.ndarray:
        tc = replace(self.train_cfg, seed=seed)
        sc = replace(self.sampler_cfg, seed=seed)
        result = fit(train_seq, self.X, self.config, tc, sc, val=val)
        return embed(train_seq, self.X, result.params, self.config)[-1]
