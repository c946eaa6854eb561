"""Bag-of-n-grams baselines: multinomial naive Bayes and a linear hinge classifier.

The linear model is trained by subgradient descent on the one-vs-rest hinge
loss with L2 regularisation. It is reported as ``linear-bow``; it plays the
role of a linear SVM without an exact QP solver.
"""

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy import sparse

from .errors import DataError, ParameterError, StateError
from .io_utils import atomic_write_text


def ngrams(tokens: Sequence[str], orders: Iterable[int]) -> List[str]:
    out = []
    for n in sorted(orders):
        for i in range(len(tokens) - n + 1):
            out.append("_".join(tokens[i:i + n]))
    return out


class NgramFeaturizer:
    """n-gram index built from training documents.

    Feature ids are assigned by descending training frequency, ties broken
    lexicographically, so they depend only on the training multiset.
    """

    def __init__(self, orders=(1,), binary=False):
        self.orders = tuple(sorted(set(int(o) for o in orders)))
        if not self.orders or self.orders[0] < 1:
            raise ParameterError(f"n-gram orders must be positive, got {orders}")
        self.binary = binary
        self.index: Dict[str, int] = None

    @property
    def fitted(self):
        return self.index is not None

    def fit(self, docs: Iterable[Sequence[str]]):
        counts = Counter()
        for toks in docs:
            counts.update(ngrams(toks, self.orders))
        feats = sorted(counts, key=lambda g: (-counts[g], g))
        self.index = {g: i for i, g in enumerate(feats)}
        return self

    def __len__(self):
        return len(self.index) if self.index else 0

    def featurize(self, tokens: Sequence[str]) -> Dict[int, int]:
        """Sparse counts ``{feature id: count}``; unseen n-grams are dropped."""
        if not self.fitted:
            raise StateError("featurizer used before fit()")
        out: Dict[int, int] = {}
        for g in ngrams(tokens, self.orders):
            j = self.index.get(g)
            if j is not None:
                out[j] = 1 if self.binary else out.get(j, 0) + 1
        return out

    def transform(self, docs: Iterable[Sequence[str]]) -> sparse.csr_matrix:
        rows, cols, vals = [], [], []
        n = 0
        for i, toks in enumerate(docs):
            for j, c in self.featurize(toks).items():
                rows.append(i)
                cols.append(j)
                vals.append(c)
            n = i + 1
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n, len(self)), dtype=np.float64)

    def to_dict(self):
        feats = sorted(self.index, key=self.index.get) if self.index else None
        return {"orders": list(self.orders), "binary": self.binary, "features": feats}

    @classmethod
    def from_dict(cls, d):
        f = cls(d["orders"], d["binary"])
        if d.get("features") is not None:
            f.index = {g: i for i, g in enumerate(d["features"])}
        return f


def _as_matrix(vectors, n_features=None):
    if sparse.issparse(vectors):
        return vectors.tocsr().astype(np.float64)
    if isinstance(vectors, np.ndarray):
        return sparse.csr_matrix(vectors.astype(np.float64))
    vectors = list(vectors)
    if n_features is None:
        n_features = 1 + max((max(v) for v in vectors if v), default=-1)
    rows, cols, vals = [], [], []
    for i, v in enumerate(vectors):
        for j, c in v.items():
            rows.append(i)
            cols.append(j)
            vals.append(c)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(vectors), n_features), dtype=np.float64)


def _argmax_low(scores):
    # np.argmax already returns the first (lowest) index on ties
    return np.asarray(scores).argmax(axis=-1)


# ---------------------------------------------------------------------------
# multinomial naive Bayes
# ---------------------------------------------------------------------------


@dataclass
class MNBModel:
    log_prior: np.ndarray  # [C]
    log_likelihood: np.ndarray  # [C, F]
    alpha: float = 1.0

    @property
    def num_classes(self):
        return self.log_prior.shape[0]

    def joint_log(self, X):
        X = _as_matrix(X, self.log_likelihood.shape[1])
        return np.asarray(X @ self.log_likelihood.T) + self.log_prior

    def to_dict(self):
        return {"kind": "mnb", "alpha": self.alpha, "log_prior": self.log_prior.tolist(),
                "log_likelihood": self.log_likelihood.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["log_prior"]), np.array(d["log_likelihood"]), d["alpha"])


def mnb_fit(vectors, labels, alpha: float = 1.0, priors_from_data: bool = True,
            num_classes: int = None) -> MNBModel:
    """Multinomial NB with additive smoothing ``alpha``."""
    if not alpha > 0:
        raise ParameterError(f"smoothing alpha must be positive, got {alpha}")
    X = _as_matrix(vectors)
    y = np.asarray(labels, dtype=np.int64)
    C = int(num_classes if num_classes is not None else y.max() + 1)
    present = np.bincount(y, minlength=C)
    if (present == 0).any():
        raise DataError(f"classes {np.flatnonzero(present == 0).tolist()} absent from training data")
    Y = sparse.csr_matrix((np.ones_like(y, dtype=np.float64), (y, np.arange(len(y)))), shape=(C, len(y)))
    counts = np.asarray((Y @ X).todense()) + alpha
    log_lik = np.log(counts) - np.log(counts.sum(axis=1, keepdims=True))
    if priors_from_data:
        log_prior = np.log(present / present.sum())
    else:
        log_prior = np.full(C, -np.log(C))
    return MNBModel(log_prior, log_lik, alpha)


def mnb_posterior(model: MNBModel, X) -> np.ndarray:
    """Normalised posterior rows (log-sum-exp)."""
    jl = model.joint_log(X)
    jl = jl - jl.max(axis=1, keepdims=True)
    p = np.exp(jl)
    return p / p.sum(axis=1, keepdims=True)


def mnb_predict(model: MNBModel, vector) -> Tuple[int, np.ndarray]:
    """Class and log posterior for a single sparse vector (dict) or row."""
    X = _as_matrix([vector], model.log_likelihood.shape[1]) if isinstance(vector, dict) else vector
    jl = model.joint_log(X)[0]
    log_post = jl - np.logaddexp.reduce(jl)
    return int(_argmax_low(jl)), log_post


# ---------------------------------------------------------------------------
# linear hinge model
# ---------------------------------------------------------------------------


@dataclass
class LinearBowModel:
    W: np.ndarray  # [C, F]
    b: np.ndarray  # [C]

    def scores(self, X):
        X = _as_matrix(X, self.W.shape[1])
        return np.asarray(X @ self.W.T) + self.b

    def to_dict(self):
        return {"kind": "linear-bow", "W": self.W.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["W"]), np.array(d["b"]))


def linear_fit(vectors, labels, l2: float = 1e-4, epochs: int = 20, lr: float = 0.1,
               seed: int = 0, num_classes: int = None, batch_size: int = 32) -> LinearBowModel:
    """One-vs-rest hinge loss, mini-batch subgradient descent over shuffled epochs."""
    if l2 < 0:
        raise ParameterError(f"l2 must be >= 0, got {l2}")
    X = _as_matrix(vectors)
    y = np.asarray(labels, dtype=np.int64)
    C = int(num_classes if num_classes is not None else max(2, y.max() + 1))
    N, F = X.shape
    W = np.zeros((C, F))
    b = np.zeros(C)
    Y = -np.ones((N, C))
    Y[np.arange(N), y] = 1.0
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        step = lr / (1.0 + epoch)
        order = rng.permutation(N)
        for s in range(0, N, batch_size):
            idx = order[s:s + batch_size]
            Xb = X[idx]
            margins = Y[idx] * (np.asarray(Xb @ W.T) + b)
            active = (margins < 1.0) * Y[idx]  # [B, C]; subgradient of hinge
            gW = -np.asarray((Xb.T @ active).T) / len(idx) + l2 * W
            gb = -active.mean(axis=0)
            W -= step * gW
            b -= step * gb
    return LinearBowModel(W, b)


def linear_predict(model: LinearBowModel, vector) -> int:
    X = _as_matrix([vector], model.W.shape[1]) if isinstance(vector, dict) else vector
    return int(_argmax_low(model.scores(X)[0]))


# ---------------------------------------------------------------------------
# convenience wrapper
# ---------------------------------------------------------------------------


@dataclass
class BowClassifier:
    """Featurizer plus MNB or linear model over token lists."""

    kind: str = "mnb"  # "mnb" or "linear"
    orders: Tuple[int, ...] = (1,)
    binary: bool = False
    alpha: float = 1.0
    l2: float = 1e-4
    epochs: int = 20
    lr: float = 0.1
    seed: int = 0
    featurizer: NgramFeaturizer = field(default=None, repr=False)
    model: object = field(default=None, repr=False)

    @property
    def name(self):
        tag = "MNB" if self.kind == "mnb" else "linear"
        return f"{tag} bow{max(self.orders)}"

    def fit(self, docs, labels, num_classes=None):
        self.featurizer = NgramFeaturizer(self.orders, self.binary).fit(docs)
        X = self.featurizer.transform(docs)
        if self.kind == "mnb":
            self.model = mnb_fit(X, labels, self.alpha, num_classes=num_classes)
        elif self.kind == "linear":
            self.model = linear_fit(X, labels, self.l2, self.epochs, self.lr, self.seed, num_classes)
        else:
            raise ParameterError(f"unknown baseline kind {self.kind!r}")
        return self

    def predict_proba(self, docs) -> np.ndarray:
        """Class scores normalised to rows summing to 1 (softmax of margins for linear)."""
        X = self.featurizer.transform(docs)
        if self.kind == "mnb":
            return mnb_posterior(self.model, X)
        s = self.model.scores(X)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, docs) -> np.ndarray:
        X = self.featurizer.transform(docs)
        scores = self.model.joint_log(X) if self.kind == "mnb" else self.model.scores(X)
        return _argmax_low(scores)

    def save(self, path):
        atomic_write_text(path, json.dumps({
            "kind": self.kind, "featurizer": self.featurizer.to_dict(), "model": self.model.to_dict(),
        }))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        feat = NgramFeaturizer.from_dict(d["featurizer"])
        model = MNBModel.from_dict(d["model"]) if d["kind"] == "mnb" else LinearBowModel.from_dict(d["model"])
        return cls(kind=d["kind"], orders=feat.orders, binary=feat.binary, featurizer=feat, model=model)
