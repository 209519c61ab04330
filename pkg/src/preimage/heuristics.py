"""Neuron scores for choosing the next ReLU split."""
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

HEURISTICS = ("balance", "soft", "lower", "width", "loose", "bound", "gap",
              "area", "under", "extra")
# already on a [0, 1] scale, so not divided by their maximum
SELF_NORMALIZED = frozenset({"balance", "soft", "bound"})
DEFAULT_WEIGHTS = {"extra": 1.0, "area": 0.75, "under": 0.5, "gap": 0.25}


def score(name, z, lb, ub, A=None):
    """Raw scores of ``c`` candidate neurons.

    Parameters
    ----------
    name : str
        One of :data:`HEURISTICS`.
    z : ndarray, shape (n, c)
        Sample pre-activations of the candidates.
    lb, ub : ndarray, shape (c,)
        Concrete pre-activation bounds (``lb < 0 < ub``).
    A : ndarray, shape (K, c), optional
        Coefficients of the cached output lower bound on each candidate's
        relu output.  Relaxation heuristics score 0 without it.
    """
    z = np.asarray(z, dtype=np.float64)
    lb = np.asarray(lb, dtype=np.float64)
    ub = np.asarray(ub, dtype=np.float64)
    n = z.shape[0]
    width = ub - lb
    if name == "balance":
        if n == 0:
            return np.zeros(lb.size)
        return 1 - np.abs(2 * np.count_nonzero(z >= 0, axis=0) / n - 1)
    if name == "soft":
        if n == 0:
            return np.zeros(lb.size)
        return 1 - np.abs(2 * expit(z).sum(axis=0) / n - 1)
    if name == "lower":
        return np.maximum(-lb, 0.0)
    if name == "width":
        return width
    if name in ("loose", "bound"):
        spread = z.max(axis=0) - z.min(axis=0) if n else np.zeros(lb.size)
        return width - spread if name == "loose" else 1 - spread / width
    if name == "gap":
        return -lb * ub / width
    if name in ("area", "under", "extra"):
        if A is None:
            return np.zeros(lb.size)
        mass = np.abs(np.asarray(A, dtype=np.float64)).sum(axis=0)
        if name == "area":
            return mass * lb * lb
        if name == "under":
            return mass * np.abs(lb)
        neg = z < 0
        count = neg.sum(axis=0)
        depth = np.abs(np.minimum(z, 0.0)).sum(axis=0)
        return np.where(count > 0, mass * depth / np.maximum(count, 1), 0.0)
    raise ValueError(f"unknown heuristic {name!r}; choose from {HEURISTICS}")


def normalize(name, raw):
    """Divide by the maximum; heuristics with a zero maximum contribute 0."""
    raw = np.asarray(raw, dtype=np.float64)
    if name in SELF_NORMALIZED:
        return raw
    top = raw.max() if raw.size else 0.0
    if top <= 0:
        return np.zeros_like(raw)
    return raw / top


@dataclass
class HeuristicConfig:
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))

    def __post_init__(self):
        for name, w in self.weights.items():
            if name not in HEURISTICS:
                raise ValueError(f"unknown heuristic {name!r}")
            if not w >= 0:
                raise ValueError(f"heuristic weight for {name!r} must be >= 0")
        if not any(w > 0 for w in self.weights.values()):
            raise ValueError("at least one heuristic weight must be positive")

    @classmethod
    def from_json(cls, data):
        if isinstance(data, (str, bytes)):
            data = json.loads(data)
        return cls({k: float(v) for k, v in data.items()})

    def to_json(self):
        return {k: self.weights[k] for k in HEURISTICS if k in self.weights}


def combine(raw, weights):
    """Weighted sum of normalized scores, accumulated in :data:`HEURISTICS` order."""
    total = None
    for name in HEURISTICS:
        w = weights.get(name, 0.0)
        if w == 0 or name not in raw:
            continue
        part = w * normalize(name, raw[name])
        total = part if total is None else total + part
    return total


def candidates(dom, blocks):
    """``(layer, index)`` pairs of unstable, unsplit neurons in layer-major order."""
    out = []
    for layer, mask in enumerate(dom.unstable(blocks)):
        out += [(layer, int(i)) for i in np.flatnonzero(mask)]
    return out


def candidate_inputs(dom, blocks, X, coeffs=None):
    """Stack per-candidate samples, bounds and cached coefficient columns."""
    cand = candidates(dom, blocks)
    layers = np.array([l for l, _ in cand], dtype=np.int64)
    idx = np.array([i for _, i in cand], dtype=np.int64)
    n = len(X)
    z = np.empty((n, len(cand)))
    lb = np.empty(len(cand))
    ub = np.empty(len(cand))
    A = None
    if coeffs is not None and cand:
        K = next(iter(coeffs.values())).shape[0]
        A = np.empty((K, len(cand)))
    for layer in np.unique(layers):
        sel = np.flatnonzero(layers == layer)
        z[:, sel] = X.pre[layer][:, idx[sel]]
        lb[sel] = dom.lbs[layer][idx[sel]]
        ub[sel] = dom.ubs[layer][idx[sel]]
        if A is not None:
            A[:, sel] = coeffs[layer][:, idx[sel]]
    return cand, z, lb, ub, A


def select_neuron(dom, blocks, X, config=None, coeffs=None):
    """The highest-scoring unstable, unsplit neuron, or None when none is left.

    Ties go to the lowest layer, then the lowest index.
    """
    config = config or HeuristicConfig()
    cand, z, lb, ub, A = candidate_inputs(dom, blocks, X, coeffs)
    if not cand:
        return None
    raw = {name: score(name, z, lb, ub, A)
           for name, w in config.weights.items() if w > 0}
    return cand[int(np.argmax(combine(raw, config.weights)))]
