"""Dynamic link-prediction evaluation.

Per evaluation step: build balanced link/non-link examples at the target
snapshot, hold out a validation slice for model selection, embed with a
model trained on the history only, featurize pairs by Hadamard product, fit
a logistic regression on 25% of the remaining examples and score AUC on
the other 75%.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .graph import SnapshotSequence

MODES = ("all-links", "new-links", "new-nodes", "multi-step")


class DegenerateSplitError(ValueError):
    """A training split holds only one class."""


class UndefinedMetricError(ValueError):
    pass


@dataclass
class LinkExampleSet:
    pairs: np.ndarray  # [n, 2], u < v
    labels: np.ndarray  # [n] in {0, 1}
    mode: str
    step: int  # last training snapshot
    target: int  # snapshot the labels come from

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def empty(self) -> bool:
        return not np.any(self.labels == 1)

    def subset(self, idx: np.ndarray) -> "LinkExampleSet":
        return LinkExampleSet(self.pairs[idx], self.labels[idx], self.mode, self.step, self.target)


def _ever_active(seq: SnapshotSequence, upto: int) -> np.ndarray:
    """Nodes with at least one link in snapshots ``0..upto`` (inclusive); empty when upto < 0."""
    seen = np.zeros(seq.num_nodes, dtype=bool)
    for s in seq.snapshots[: max(upto + 1, 0)]:
        seen |= s.degree > 0
    return seen


def _sample_non_links(seq, target: int, count: int, rng, first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Up to ``count`` distinct unconnected pairs (u < v) with u in ``first`` and v in ``second`` (or swapped)."""
    snap = seq[target]
    n = seq.num_nodes
    first_idx, second_idx = np.flatnonzero(first), np.flatnonzero(second)
    if count <= 0 or len(first_idx) == 0 or len(second_idx) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    n_cand = len(first_idx) * len(second_idx)
    if n_cand <= 4_000_000:
        a, b = np.meshgrid(first_idx, second_idx, indexing="ij")
        u, v = np.minimum(a, b).ravel(), np.maximum(a, b).ravel()
        keys = np.unique(u[u != v] * n + v[u != v])
        u, v = keys // n, keys % n
        keys = keys[~snap.has_edges(u, v)]
        chosen = rng.permutation(keys)[:count]
        return np.stack([chosen // n, chosen % n], axis=1)
    taken: set = set()
    out = []
    attempts = 0
    while len(out) < count and attempts < 100 * count:
        attempts += 1
        a, b = int(rng.choice(first_idx)), int(rng.choice(second_idx))
        if a == b:
            continue
        u, v = min(a, b), max(a, b)
        key = u * n + v
        if key in taken or snap.has_edges(np.array([u]), np.array([v]))[0]:
            continue
        taken.add(key)
        out.append((u, v))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def build_examples(seq: SnapshotSequence, t: int, mode: str, rng: np.random.Generator, delta: int = 1) -> LinkExampleSet:
    """Balanced examples for predicting snapshot ``t + delta`` from history ``0..t``.

    all-links: every link of the target. new-links: target links absent at t.
    new-nodes: target links touching a node whose first link is at t.
    multi-step: target links between nodes already seen by t.
    Non-links are uniform over unconnected pairs of nodes active at the
    target, with the same endpoint restrictions as the positives.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode != "multi-step" and delta != 1:
        raise ValueError("delta only applies to multi-step mode")
    target = t + delta
    if t < 0 or target >= len(seq):
        raise IndexError(f"target snapshot {target} beyond sequence of length {len(seq)}")
    snap = seq[target]
    pos = snap.undirected_edges()
    active = snap.degree > 0
    first = second = active
    if mode == "new-links":
        pos = pos[~seq[t].has_edges(pos[:, 0], pos[:, 1])]
    elif mode == "new-nodes":
        new = (seq[t].degree > 0) & ~_ever_active(seq, t - 1)
        pos = pos[new[pos[:, 0]] | new[pos[:, 1]]]
        first = active & new
    elif mode == "multi-step":
        seen = _ever_active(seq, t)
        pos = pos[seen[pos[:, 0]] & seen[pos[:, 1]]]
        first = second = active & seen
    neg = _sample_non_links(seq, target, len(pos), rng, first, second)
    if len(neg) < len(pos):
        # too few non-links to balance; drop positives at random
        pos = pos[np.sort(rng.permutation(len(pos))[: len(neg)])]
    pairs = np.concatenate([pos, neg]).astype(np.int64)
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return LinkExampleSet(pairs, labels, mode, t, target)


def split_indices(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random ``fraction`` / remainder index split, keeping both sides non-empty when n >= 2."""
    order = rng.permutation(n)
    k = int(round(fraction * n))
    if n >= 2:
        k = min(max(k, 1), n - 1)
    return order[:k], order[k:]


def split_examples(ex: LinkExampleSet, fraction: float, rng: np.random.Generator) -> tuple[LinkExampleSet, LinkExampleSet]:
    a, b = split_indices(len(ex), fraction, rng)
    return ex.subset(a), ex.subset(b)


def hadamard_features(E: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return E[pairs[:, 0]] * E[pairs[:, 1]]


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    center: np.ndarray
    scale: np.ndarray
    iterations: int = 0
    grad_norm: float = 0.0

    def decision(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.center) / self.scale) @ self.weights + self.bias


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def logistic_fit(features: np.ndarray, labels: np.ndarray, l2: float = 1e-4,
                 tol: float = 1e-6, max_iter: int = 10_000) -> LogisticModel:
    """L2-regularized logistic regression by full-batch gradient descent.

    Minimizes mean log-loss + ``l2/2 * |w|^2`` (bias unpenalized) on
    standardized features, with step 1/L from the loss's Lipschitz bound.
    Stops when the gradient norm drops below ``tol`` or after ``max_iter``.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise DegenerateSplitError("training split has a single class")
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - center) / scale
    n, d = Z.shape
    Zb = np.hstack([Z, np.ones((n, 1))])
    lipschitz = 0.25 * np.linalg.norm(Zb, 2) ** 2 / n + l2
    step = 1.0 / lipschitz
    theta = np.zeros(d + 1)
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    it = 0
    gnorm = float("inf")
    for it in range(1, max_iter + 1):
        p = _sigmoid(Zb @ theta)
        grad = Zb.T @ (p - y) / n + reg * theta
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            break
        theta -= step * grad
    return LogisticModel(theta[:-1].copy(), float(theta[-1]), center, scale, it, gnorm)


def logistic_predict(model: LogisticModel, features: np.ndarray) -> np.ndarray:
    """Probability of the positive class."""
    return _sigmoid(model.decision(np.asarray(features, dtype=np.float64)))


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2).

    Mann-Whitney rank statistic with average ranks for ties.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    # average 1-based rank within each run of tied scores
    starts = np.flatnonzero(np.concatenate([[True], sorted_s[1:] != sorted_s[:-1]]))
    ends = np.concatenate([starts[1:], [len(s)]])
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def micro_macro(aucs, counts) -> tuple[float, float]:
    """(example-weighted mean, unweighted mean) of per-step AUCs."""
    a = np.asarray(aucs, dtype=np.float64)
    c = np.asarray(counts, dtype=np.float64)
    return float((a * c).sum() / c.sum()), float(a.mean())


@dataclass
class StepScore:
    step: int  # training horizon t
    target: int
    run: int
    auc: float
    n_test: int


@dataclass
class EvalReport:
    mode: str
    runs: int
    scores: list[StepScore] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)  # target steps without positives

    def targets(self) -> list[int]:
        return sorted({s.target for s in self.scores})

    def run_aggregates(self) -> list[tuple[float, float]]:
        out = []
        for r in range(self.runs):
            rs = [s for s in self.scores if s.run == r]
            if rs:
                out.append(micro_macro([s.auc for s in rs], [s.n_test for s in rs]))
        return out

    def _agg(self, idx: int) -> tuple[float, float]:
        vals = [a[idx] for a in self.run_aggregates()]
        if not vals:
            return float("nan"), float("nan")
        return float(np.mean(vals)), float(np.std(vals))

    @property
    def micro_auc(self) -> float:
        return self._agg(0)[0]

    @property
    def micro_std(self) -> float:
        return self._agg(0)[1]

    @property
    def macro_auc(self) -> float:
        return self._agg(1)[0]

    @property
    def macro_std(self) -> float:
        return self._agg(1)[1]

    def per_step(self) -> list[dict]:
        rows = []
        for tgt in self.targets():
            ss = [s for s in self.scores if s.target == tgt]
            vals = [s.auc for s in ss]
            rows.append({"target": tgt, "step": ss[0].step, "mean_auc": float(np.mean(vals)),
                         "std_auc": float(np.std(vals)), "n_test": int(np.mean([s.n_test for s in ss]))})
        return rows

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "runs": self.runs,
            "micro_auc": self.micro_auc, "micro_std": self.micro_std,
            "macro_auc": self.macro_auc, "macro_std": self.macro_std,
            "per_step": self.per_step(),
            "skipped_targets": self.skipped,
            "scores": [vars(s) for s in self.scores],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "target", "mode", "run", "auc", "n_test"])
        for s in self.scores:
            w.writerow([s.step, s.target, self.mode, s.run, repr(s.auc), s.n_test])
        return buf.getvalue()

    def per_step_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target", "mean_auc", "std_auc", "n_test"])
        for row in self.per_step():
            w.writerow([row["target"], repr(row["mean_auc"]), repr(row["std_auc"]), row["n_test"]])
        return buf.getvalue()


class Trainer(Protocol):
    def __call__(self, train_seq: SnapshotSequence, val: LinkExampleSet | None, seed: int) -> np.ndarray:
        """Embeddings ``[N, d]`` at the last snapshot of ``train_seq``."""


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def score_embeddings(E: np.ndarray, ex: LinkExampleSet, rng: np.random.Generator,
                     train_fraction: float = 0.25, classifier_l2: float = 1e-4,
                     attempts: int = 100) -> tuple[float, int]:
    """Downstream classifier AUC on a fresh train/test split; returns (auc, n_test)."""
    feats = hadamard_features(E, ex.pairs)
    for _ in range(attempts):
        tr, te = split_indices(len(ex), train_fraction, rng)
        if len(np.unique(ex.labels[tr])) == 2 and len(np.unique(ex.labels[te])) == 2:
            break
    else:
        raise DegenerateSplitError(f"no two-class split found for target {ex.target}")
    model = logistic_fit(feats[tr], ex.labels[tr], l2=classifier_l2)
    return auc(logistic_predict(model, feats[te]), ex.labels[te]), len(te)


def evaluate(
    seq: SnapshotSequence,
    trainer: Callable,
    mode: str = "all-links",
    runs: int = 10,
    seed: int = 0,
    start: int = 0,
    horizon: int = 6,
    val_fraction: float = 0.2,
    train_fraction: float = 0.25,
    classifier_l2: float = 1e-4,
    downstream_only: bool = False,
    threads: int = 1,
) -> EvalReport:
    """Full protocol over every training horizon ``t >= start`` with a next snapshot.

    Each (run, t) job owns RNG streams derived from (seed, run, t), so
    results do not depend on ``threads``. ``downstream_only`` trains one
    representation per t and rerandomizes only examples and classifier.
    For multi-step, one model is trained on all but the last ``horizon``
    snapshots and scored against each of them.
    """
    if len(seq) < 2:
        raise ValueError("evaluation needs at least two snapshots")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    report = EvalReport(mode, runs)
    if mode == "multi-step":
        t0 = len(seq) - 1 - horizon
        if t0 < 0:
            raise ValueError(f"horizon {horizon} leaves no training snapshots in a sequence of {len(seq)}")
        jobs = [(r, t0) for r in range(runs)]
    else:
        jobs = [(r, t) for r in range(runs) for t in range(start, len(seq) - 1)]

    cache: dict[int, np.ndarray] = {}

    def embed(r: int, t: int, val) -> np.ndarray:
        if downstream_only:
            if t not in cache:
                cache[t] = trainer(seq[: t + 1], val, derive_seed(seed, 0, t, 1))
            return cache[t]
        return trainer(seq[: t + 1], val, derive_seed(seed, r, t, 1))

    def run_job(job):
        r, t = job
        rng = np.random.default_rng(np.random.SeedSequence([seed, r, t]))
        deltas = range(1, horizon + 1) if mode == "multi-step" else [1]
        example_sets = [build_examples(seq, t, mode, rng, delta=d) for d in deltas]
        val = None
        pools = []
        for ex in example_sets:
            if ex.empty or len(np.unique(ex.labels)) < 2 or len(ex) < 4:
                pools.append(None)
                continue
            if val is None:
                val, rest = split_examples(ex, val_fraction, rng)
            else:
                rest = ex
            pools.append(rest)
        if all(p is None for p in pools):
            return [], [ex.target for ex in example_sets]
        E = embed(r, t, val)
        out, skipped = [], []
        for ex, rest in zip(example_sets, pools):
            if rest is None or len(np.unique(rest.labels)) < 2 or len(rest) < 4:
                skipped.append(ex.target)
                continue
            value, n_test = score_embeddings(E, rest, rng, train_fraction, classifier_l2)
            out.append(StepScore(t, ex.target, r, value, n_test))
        return out, skipped

    if threads > 1 and not downstream_only:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_job, jobs))
    else:
        results = [run_job(j) for j in jobs]
    skipped: set[int] = set()
    for scores, sk in results:
        report.scores.extend(scores)
        skipped.update(sk)
    report.skipped = sorted(skipped)
    return report

