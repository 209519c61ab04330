"""Monte Carlo samples inside subdomains, with optional prior weights."""
import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .domain import consistent
from .relax import backward_bounds

log = logging.getLogger(__name__)

HIT_RATE_FLOOR = 0.05
BUDGET_FACTOR = 20
THINNING = 10
BURN_IN = 50
MAX_CHAINS = 32
HIT_AND_RUN_ROUNDS = 8
ESS_WARN_FRACTION = 0.01


@dataclass
class SampleSet:
    points: np.ndarray    # (N, d)
    weights: np.ndarray   # (N,)
    pre: list             # per relu layer, (N, n_q)
    out: np.ndarray       # (N, K) values of the specification outputs

    def __len__(self):
        return self.points.shape[0]

    @property
    def inside(self):
        """Samples whose outputs satisfy the specification."""
        return np.all(self.out >= 0, axis=1)

    @property
    def total_weight(self):
        return float(self.weights.sum())

    def subset(self, mask):
        return SampleSet(self.points[mask], self.weights[mask],
                         [z[mask] for z in self.pre], self.out[mask])

    def concat(self, other):
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        return SampleSet(np.vstack([self.points, other.points]),
                         np.concatenate([self.weights, other.weights]),
                         [np.vstack([a, b]) for a, b in zip(self.pre, other.pre)],
                         np.vstack([self.out, other.out]))

    @classmethod
    def empty(cls, d, layer_sizes, K):
        return cls(np.zeros((0, d)), np.zeros(0),
                   [np.zeros((0, n)) for n in layer_sizes], np.zeros((0, K)))


def evaluate(net, points, weight_fn=None):
    """Run the (specification-augmented) network and wrap the results."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return SampleSet.empty(net.input_dim, net.relu_sizes, net.output_dim)
    out, pre = net.run(points)
    weights = (np.ones(len(points)) if weight_fn is None
               else np.asarray(weight_fn(points), dtype=np.float64))
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weight function produced negative or non-finite values")
    return SampleSet(points, weights, pre, out)


def sample_uniform(lo, hi, n, rng):
    """``n`` i.i.d. uniform points in the box; fixed coordinates stay fixed."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("empty box")
    return lo + (hi - lo) * rng.random((n, lo.size))


def rejection_sample(net, dom, n, rng, weight_fn=None, budget=None):
    """Uniform box samples filtered on the subdomain's split signs.

    Stops early when the first batch shows a hit rate below the fallback
    floor.  Returns ``(samples, hit_rate)``; ``hit_rate`` is 0 when nothing
    was accepted.
    """
    budget = BUDGET_FACTOR * n if budget is None else budget
    kept = SampleSet.empty(net.input_dim, net.relu_sizes, net.output_dim)
    tried = 0
    while len(kept) < n and tried < budget:
        need = n - len(kept)
        chunk = int(min(budget - tried, max(4 * need, 256)))
        batch = evaluate(net, sample_uniform(dom.lo, dom.hi, chunk, rng),
                         weight_fn)
        tried += chunk
        ok = consistent(dom, batch.pre, chunk)
        kept = kept.concat(batch.subset(ok))
        if len(kept) / tried < HIT_RATE_FLOOR:
            break
    rate = len(kept) / tried if tried else 0.0
    if len(kept) > n:
        kept = kept.subset(np.arange(n))
    return kept, rate


def split_polytope(net, dom):
    """Outer polytope ``G x <= h`` implied by the split constraints.

    Each split ``z < 0`` contributes the row of its linear lower bound, each
    split ``z >= 0`` the negated row of its linear upper bound.
    """
    blocks = net.blocks()
    ctx = dom.context(blocks)
    rows, offs = [], []
    by_layer = {}
    for layer, neuron, sign in dom.splits:
        by_layer.setdefault(layer, []).append((neuron, sign))
    for layer in sorted(by_layer):
        neurons = [i for i, _ in by_layer[layer]]
        lin = backward_bounds(ctx, layer, rows=neurons)
        for k, (_, sign) in enumerate(by_layer[layer]):
            if sign == "-":
                rows.append(lin.A_lower[k])
                offs.append(-lin.b_lower[k])
            else:
                rows.append(-lin.A_upper[k])
                offs.append(lin.b_upper[k])
    d = dom.lo.size
    if not rows:
        return np.zeros((0, d)), np.zeros(0)
    return np.array(rows), np.array(offs)


def hit_and_run(G, h, lo, hi, starts, n, rng, thinning=THINNING,
                burn_in=BURN_IN):
    """Hit-and-run chains in ``{x : G x <= h, lo <= x <= hi}``.

    One chain runs from each start point; chains advance together and a point
    is recorded from every chain after each ``thinning`` steps once the burn-in
    is over.  Coordinates with ``lo == hi`` are never moved.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    x = np.array(np.atleast_2d(starts), dtype=np.float64)
    if np.any(x < lo - 1e-9) or np.any(x > hi + 1e-9) or \
            (len(G) and np.any(x @ G.T > h + 1e-7 * (1 + np.abs(h)))):
        raise ValueError("hit-and-run start point is not feasible")
    x = np.clip(x, lo, hi)
    free = hi > lo
    if not np.any(free):
        return np.repeat(x[:1], n, axis=0)
    chains = x.shape[0]
    out = []
    rounds = -(-n // chains)
    total = burn_in + rounds * thinning
    with np.errstate(divide="ignore", invalid="ignore"):
        for step in range(1, total + 1):
            u = rng.standard_normal(x.shape) * free
            u /= np.sqrt((u * u).sum(axis=1))[:, None]
            t1 = (lo - x) / u
            t2 = (hi - x) / u
            moving = u != 0
            t_min = np.where(moving, np.minimum(t1, t2), -np.inf).max(axis=1)
            t_max = np.where(moving, np.maximum(t1, t2), np.inf).min(axis=1)
            if len(G):
                gu = u @ G.T
                ratio = np.maximum(h - x @ G.T, 0.0) / gu
                t_max = np.minimum(t_max, np.where(gu > 0, ratio, np.inf).min(axis=1))
                t_min = np.maximum(t_min, np.where(gu < 0, ratio, -np.inf).max(axis=1))
            ok = t_max > t_min  # zero-length chords keep the current point
            t = t_min + (t_max - t_min) * rng.random(chains)
            step_x = np.minimum(np.maximum(x + t[:, None] * u, lo), hi)
            x = np.where(ok[:, None], step_x, x)
            if step > burn_in and (step - burn_in) % thinning == 0:
                out.append(x)
    return np.vstack(out)[:n]


def _chebyshev_start(G, h, lo, hi):
    """A deep interior point of the outer polytope, or None if it is empty."""
    d = lo.size
    A = np.vstack([G, np.eye(d), -np.eye(d)]) if len(G) else \
        np.vstack([np.eye(d), -np.eye(d)])
    b = np.concatenate([h, hi, -lo]) if len(G) else np.concatenate([hi, -lo])
    norms = np.linalg.norm(A, axis=1)
    res = linprog(np.r_[np.zeros(d), -1.0], A_ub=np.c_[A, norms], b_ub=b,
                  bounds=[(None, None)] * d + [(0, None)], method="highs")
    if res.status != 0:
        return None
    return np.clip(res.x[:d], lo, hi)


def replenish(net, dom, X, n_target, rng, weight_fn=None):
    """Top the sample set up to ``n_target`` points, keeping existing ones.

    Rejection sampling is tried first; below a 5% hit rate the remainder
    comes from hit-and-run on the split polytope, filtered on the exact signs.
    Returns ``(samples, info)``; ``info["empty"]`` is set when no point of
    the subdomain could be found.
    """
    info = {"method": None, "hit_rate": None, "empty": False}
    if not dom.feasible:
        info["empty"] = True
        return X, info
    if len(X) >= n_target:
        return X, info
    need = n_target - len(X)
    if not dom.splits:
        extra = evaluate(net, sample_uniform(dom.lo, dom.hi, need, rng),
                         weight_fn)
        info.update(method="uniform", hit_rate=1.0)
        return X.concat(extra), info
    got, rate = rejection_sample(net, dom, need, rng, weight_fn)
    info.update(method="rejection", hit_rate=rate)
    X = X.concat(got)
    need = n_target - len(X)
    if need <= 0:
        return X, info
    G, h = split_polytope(net, dom)
    if len(X):
        pool = X.points
    else:
        start = _chebyshev_start(G, h, dom.lo, dom.hi)
        if start is None:
            info["empty"] = True
            return X, info
        pool = start[None]
    info["method"] = "hit-and-run"
    for _ in range(HIT_AND_RUN_ROUNDS):
        # chains may share a start; the burn-in separates them
        starts = pool[rng.choice(len(pool), size=MAX_CHAINS)]
        pts = hit_and_run(G, h, dom.lo, dom.hi, starts, max(2 * need, 64), rng)
        batch = evaluate(net, pts, weight_fn)
        ok = consistent(dom, batch.pre, len(batch))
        got = batch.subset(ok)
        if len(got) == 0:
            break  # the sign region is a negligible part of the outer polytope
        if len(got) > need:
            got = got.subset(np.arange(need))
        X = X.concat(got)
        need = n_target - len(X)
        if need <= 0:
            break
        pool = X.points
    if len(X) == 0:
        info["empty"] = True
    return X, info


def effective_sample_size(weights):
    """Kish effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    top = w.max(initial=0.0)
    if top == 0:
        raise ValueError("all weights are zero")
    w = w / top  # tiny weights would underflow when squared
    return float(w.sum()) ** 2 / float(w @ w)


def check_ess(weights):
    n = len(weights)
    ess = effective_sample_size(weights)
    if ess < ESS_WARN_FRACTION * n:
        log.warning("effective sample size %.1f is below %.0f%% of %d samples",
                    ess, 100 * ESS_WARN_FRACTION, n)
    return ess


class WeightFunction:
    """A named, JSON-parameterised prior weight ``w(x) >= 0``."""

    def __init__(self, name, params=None, input_shape=None):
        if name not in WEIGHT_FUNCTIONS:
            raise ValueError(f"unknown weight function {name!r}; choose from "
                             f"{sorted(WEIGHT_FUNCTIONS)}")
        self.name = name
        self.params = dict(params or {})
        self._fn = WEIGHT_FUNCTIONS[name](self.params, input_shape)

    def __call__(self, X):
        return self._fn(np.atleast_2d(np.asarray(X, dtype=np.float64)))

    @classmethod
    def parse(cls, text, input_shape=None):
        """Parse ``NAME`` or ``NAME:{json}``."""
        name, _, blob = text.partition(":")
        params = json.loads(blob) if blob.strip() else {}
        return cls(name.strip(), params, input_shape)

    def to_json(self):
        return {"name": self.name, "params": self.params}


def _uniform(params, input_shape):
    return lambda X: np.ones(X.shape[0])


def _brightness(params, input_shape):
    """Product over patch pixels of ``1 - max(0, p - p_max) / (1 - p_max)``.

    ``p`` is a pixel's mean over channels and ``p_max`` the brightest pixel of
    the reference image.
    """
    image = np.asarray(params["image"], dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    mask = np.asarray(params["mask"], dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError("brightness mask must match the image height and width")
    p_max = float(params.get("p_max", image.mean(axis=2).max()))
    shape = image.shape

    def weight(X):
        if p_max >= 1.0:
            return np.ones(X.shape[0])
        bright = X.reshape((X.shape[0],) + shape).mean(axis=3)[:, mask]
        factors = 1 - np.maximum(0.0, bright - p_max) / (1 - p_max)
        return np.prod(factors, axis=1)

    return weight


def _piecewise(params, input_shape):
    knots = params["knots"]
    values = params["values"]
    if len(knots) != len(values):
        raise ValueError("piecewise weights need one value list per knot list")
    coords = [(j, np.asarray(k, float), np.asarray(v, float))
              for j, (k, v) in enumerate(zip(knots, values)) if k is not None]
    for _, k, v in coords:
        if np.any(v < 0) or k.shape != v.shape:
            raise ValueError("piecewise weights need matching, nonnegative values")

    def weight(X):
        w = np.ones(X.shape[0])
        for j, k, v in coords:
            w *= np.interp(X[:, j], k, v)
        return w

    return weight


WEIGHT_FUNCTIONS = {
    "uniform": _uniform,
    "brightness": _brightness,
    "piecewise": _piecewise,
}
