"""Backward linear bound propagation with optimisable ReLU relaxations.

The network is handled as a chain of affine blocks separated by ReLUs (see
:meth:`preimage.model.Network.blocks`).  ReLU layers are indexed ``0..R-1``
and block ``R`` produces the (specification-augmented) output.

A linear lower bound of ``C z_t + c0`` is obtained by walking backwards from
layer ``t`` and replacing every ReLU by a linear function.  For an unstable
neuron with bounds ``lb < 0 < ub`` the lower relaxation is ``alpha * z`` and
the upper one is the chord ``ub (z - lb) / (ub - lb)``.  Upper bounds are
lower bounds of the negated rows.

Gradients of the sample objective with respect to ``alpha`` and ``beta`` are
computed by an explicit reverse sweep over the recorded backward pass.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, logsumexp

# tolerance used when deciding that interval bounds are empty
EMPTY_TOL = 1e-9


def _left(L, W):
    """``L @ W`` for dense ``L`` and dense-or-sparse ``W``."""
    if sp.issparse(W):
        return np.asarray((W.T @ L.T).T)
    return L @ W


def _left_t(G, W):
    """``G @ W.T`` for dense ``G`` and dense-or-sparse ``W``."""
    if sp.issparse(W):
        return np.asarray((W @ G.T).T)
    return G @ W.T


def relu_relaxation(lb, ub, alpha):
    """Linear lower and upper bounds of ``relu(z)`` for ``lb <= z <= ub``.

    Returns ``((lower_slope, lower_intercept), (upper_slope, upper_intercept))``.
    """
    if lb > ub:
        raise ValueError(f"lower bound {lb} exceeds upper bound {ub}")
    if ub <= 0:
        return (0.0, 0.0), (0.0, 0.0)
    if lb >= 0:
        return (1.0, 0.0), (1.0, 0.0)
    slope = ub / (ub - lb)
    return (float(alpha), 0.0), (slope, -lb * slope)


def concretize(A, b, lo, hi):
    """Minimum of ``A x + b`` over the box ``[lo, hi]`` (row-wise)."""
    center = (lo + hi) / 2
    radius = (hi - lo) / 2
    return A @ center - np.abs(A) @ radius + b


def default_alpha(lb, ub):
    """CROWN slope choice: 1 when the positive side dominates, else 0."""
    return (ub >= -lb).astype(np.float64)


@dataclass
class _LayerRelax:
    active: np.ndarray
    unstable: np.ndarray
    up_slope: np.ndarray
    up_int: np.ndarray
    alpha0: np.ndarray
    split_idx: np.ndarray
    split_sign: np.ndarray  # +1 for z >= 0, -1 for z < 0


def _layer_relax(lb, ub, split_idx, split_sign):
    n = lb.size
    pos = np.zeros(n, bool)
    neg = np.zeros(n, bool)
    pos[split_idx[split_sign > 0]] = True
    neg[split_idx[split_sign < 0]] = True
    inactive = neg | ((ub <= 0) & ~pos)
    active = pos | ((lb >= 0) & ~inactive)
    unstable = ~(active | inactive)
    width = np.where(unstable, ub - lb, 1.0)
    up_slope = np.where(unstable, ub / width, 0.0)
    up_int = np.where(unstable, -lb * up_slope, 0.0)
    return _LayerRelax(active, unstable, up_slope, up_int,
                       default_alpha(lb, ub), split_idx, split_sign)


def split_arrays(splits, n_layers):
    """Group ``(layer, neuron, sign)`` triples into per-layer index arrays."""
    grouped = [([], []) for _ in range(n_layers)]
    for layer, neuron, sign in splits:
        grouped[layer][0].append(neuron)
        grouped[layer][1].append(1 if sign in ("+", 1) else -1)
    return [(np.array(i, dtype=np.int64), np.array(s, dtype=np.int64))
            for i, s in grouped]


@dataclass
class LinearBounds:
    """``A_lower v + b_lower <= target <= A_upper v + b_upper``."""
    A_lower: np.ndarray
    b_lower: np.ndarray
    A_upper: np.ndarray
    b_upper: np.ndarray


@dataclass
class RelaxParams:
    """Per-layer ``alpha`` of shape (K, n) and per-split ``beta`` of shape (K, s)."""
    alpha: list
    beta: list

    def copy(self):
        return RelaxParams([a.copy() for a in self.alpha],
                           [b.copy() for b in self.beta])


@dataclass
class Tape:
    A: np.ndarray
    b: np.ndarray
    steps: list = field(default_factory=list)   # per relu layer, top-down
    coeffs: dict = field(default_factory=dict)  # layer -> (Lam, const)


class BoundContext:
    """Blocks, input box, per-layer concrete bounds and split constraints."""

    def __init__(self, blocks, lo, hi, lbs, ubs, splits=()):
        self.blocks = blocks
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.lbs = list(lbs)
        self.ubs = list(ubs)
        self.n_relu = len(blocks) - 1
        self.splits = list(splits)
        self._split = split_arrays(self.splits, self.n_relu)
        self._relax = {}

    def layer(self, q):
        if q not in self._relax:
            idx, sign = self._split[q]
            self._relax[q] = _layer_relax(self.lbs[q], self.ubs[q], idx, sign)
        return self._relax[q]

    def unstable(self, q):
        return self.layer(q).unstable

    def backward(self, target, C, c0=None, params=None, record=False):
        """Lower bound of ``C z_target + c0`` as an affine map of the input."""
        Lam = np.array(C, dtype=np.float64, ndmin=2)
        const = np.zeros(Lam.shape[0]) if c0 is None else np.array(c0, float)
        tape = Tape(None, None)
        for r in range(target, -1, -1):
            blk = self.blocks[r]
            const = const + Lam @ blk.bias
            M = _left(Lam, blk.weight)
            if r == 0:
                tape.A, tape.b = M, const
                if record:
                    tape.coeffs["input"] = (M, const)
                return tape
            q = r - 1
            info = self.layer(q)
            alpha = info.alpha0 if params is None else params.alpha[q]
            pos = M >= 0
            slope = np.where(info.unstable, np.where(pos, alpha, info.up_slope),
                             info.active.astype(np.float64))
            upper_used = info.unstable & ~pos
            Lam = M * slope
            const = const + (M * np.where(upper_used, info.up_int, 0.0)).sum(1)
            if params is not None and info.split_idx.size:
                # bound C z - beta * s * z_i, which is below C z on the branch
                Lam[:, info.split_idx] -= params.beta[q] * info.split_sign
            tape.steps.append((q, M, pos, slope, upper_used))
            if record:
                tape.coeffs[q] = (Lam, const)
        raise AssertionError("unreachable")

    def gradient(self, tape, target, G_A, G_b):
        """Reverse sweep: gradients of a scalar w.r.t. ``alpha`` and ``beta``."""
        g_alpha = [None] * self.n_relu
        g_beta = [None] * self.n_relu
        steps = {s[0]: s for s in tape.steps}
        G_M = G_A
        for r in range(0, target + 1):
            blk = self.blocks[r]
            G_Lam = _left_t(G_M, blk.weight) + np.outer(G_b, blk.bias)
            if r == target:
                break
            q, M, pos, slope, upper_used = steps[r]
            info = self.layer(q)
            g_alpha[q] = np.where(info.unstable & pos, G_Lam * M, 0.0)
            g_beta[q] = -G_Lam[:, info.split_idx] * info.split_sign
            G_M = G_Lam * slope + G_b[:, None] * np.where(upper_used,
                                                          info.up_int, 0.0)
        return g_alpha, g_beta

    def init_params(self, K):
        alpha = [np.broadcast_to(self.layer(q).alpha0, (K, self.lbs[q].size)).copy()
                 for q in range(self.n_relu)]
        beta = [np.zeros((K, self.layer(q).split_idx.size))
                for q in range(self.n_relu)]
        return RelaxParams(alpha, beta)

    def layer_bounds(self, q):
        """Concrete bounds of ``z_q`` over the box, via backward propagation."""
        n = self.blocks[q].bias.size
        eye = np.eye(n)
        tape = self.backward(q, np.vstack([eye, -eye]))
        vals = concretize(tape.A, tape.b, self.lo, self.hi)
        return vals[:n], -vals[n:]


def clip_splits(lb, ub, idx, sign):
    lb, ub = lb.copy(), ub.copy()
    lb[idx[sign > 0]] = np.maximum(lb[idx[sign > 0]], 0.0)
    ub[idx[sign < 0]] = np.minimum(ub[idx[sign < 0]], 0.0)
    return lb, ub


def interval_bounds(blocks, lo, hi, splits=(), lbs=None, ubs=None):
    """Sound per-neuron bounds on every ReLU input for the box plus splits.

    Existing bounds (``lbs``, ``ubs``) are intersected with the new ones, so
    the result is never wider.  Returns ``(lbs, ubs, feasible)``.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("empty input box (lower > upper)")
    n_relu = len(blocks) - 1
    grouped = split_arrays(splits, n_relu)
    new_l, new_u = [], []
    feasible = True
    for q in range(n_relu):
        ctx = BoundContext(blocks, lo, hi, new_l, new_u, splits)
        lb, ub = ctx.layer_bounds(q)
        if q > 0:
            # layer-wise interval step picks up clipped earlier intervals
            W = blocks[q].weight
            h_lo, h_hi = np.maximum(new_l[-1], 0), np.maximum(new_u[-1], 0)
            c = _left_t((h_lo + h_hi)[None] / 2, W)[0] + blocks[q].bias
            r = _left_t((h_hi - h_lo)[None] / 2, abs(W))[0]
            lb, ub = np.maximum(lb, c - r), np.minimum(ub, c + r)
        if lbs is not None:
            lb = np.maximum(lb, lbs[q])
            ub = np.minimum(ub, ubs[q])
        lb, ub = clip_splits(lb, ub, *grouped[q])
        empty = lb > ub
        if np.any(lb - ub > EMPTY_TOL * (1 + np.abs(lb) + np.abs(ub))):
            feasible = False
        # rounding-level crossings collapse to a point inside the old interval
        mid = (lb + ub) / 2
        if lbs is not None:
            mid = np.minimum(np.maximum(mid, lbs[q]), ubs[q])
        lb = np.where(empty, mid, lb)
        ub = np.where(empty, mid, ub)
        new_l.append(lb)
        new_u.append(ub)
    return new_l, new_u, feasible


def backward_bounds(ctx, target, rows=None, to=None, params_lower=None,
                    params_upper=None):
    """LinearBounds of ``z_target[rows]`` in terms of layer ``to``.

    ``to=None`` (or ``"input"``) means the network input.  ``target`` may be
    ``ctx.n_relu`` for the final output.
    """
    if to is None:
        to = "input"
    if to != "input" and not (0 <= to < target):
        raise ValueError(f"cannot bound layer {target} by layer {to}")
    n = ctx.blocks[target].bias.size
    rows = np.arange(n) if rows is None else np.atleast_1d(rows)
    C = np.eye(n)[rows]
    for p in (params_lower, params_upper):
        if p is not None and len(p.alpha) != ctx.n_relu:
            raise ValueError("relaxation parameters do not match the network")
    low = ctx.backward(target, C, params=params_lower, record=True)
    up = ctx.backward(target, -C, params=params_upper, record=True)
    A_l, b_l = low.coeffs[to]
    A_u, b_u = up.coeffs[to]
    return LinearBounds(A_l, b_l, -A_u, -b_u)


def objective(A, b, X, weights, side="under", inside=None):
    """Soft coverage of samples by the region ``A x + b >= 0``.

    ``side="under"``: weighted mean of ``sigmoid(-log sum exp(-(A x + b)))``.
    ``side="over"``: weighted mean, over samples outside the preimage
    (``inside`` False), of ``sigmoid(log sum exp(-(A x + b)))``, i.e. soft
    exclusion by the upper bounds.
    """
    return objective_and_grad(A, b, X, weights, side, inside)[0]


def objective_and_grad(A, b, X, weights, side="under", inside=None):
    weights = np.asarray(weights, dtype=np.float64)
    if side == "over" and inside is not None and not np.all(inside):
        weights = np.where(inside, 0.0, weights)
    total = weights.sum()
    if not total > 0:
        raise ValueError("samples have zero total weight")
    g = X @ A.T + b
    lse = logsumexp(-g, axis=1)
    soft = np.exp(-g - lse[:, None])  # softmax(-g)
    if side == "under":
        s = -lse
        ds_dg = soft
    else:
        s = lse
        ds_dg = -soft
    sig = expit(s)
    value = float(weights @ sig / total)
    dval_dg = (weights * sig * (1 - sig) / total)[:, None] * ds_dg
    return value, dval_dg.T @ X, dval_dg.sum(0)


@dataclass
class OptResult:
    params: RelaxParams
    A: np.ndarray          # plane rows (lower bound for under, upper for over)
    b: np.ndarray
    value: float
    initial_value: float
    coeffs: dict           # relu layer -> plane coefficients on that relu's output


def optimize_params(ctx, X, weights, side="under", inside=None, iterations=20,
                    lr=0.1, decay=0.98, use_beta=True):
    """Projected gradient ascent on the sample objective over alpha and beta.

    Keeps the best iterate, so the returned value is never below the value at
    the CROWN initialisation.
    """
    target = ctx.n_relu
    K = ctx.blocks[target].bias.size
    sign = 1.0 if side == "under" else -1.0
    C = sign * np.eye(K)
    params = ctx.init_params(K)
    has_free = any(np.any(ctx.unstable(q)) for q in range(ctx.n_relu)) or (
        use_beta and any(p.size for p in params.beta))

    def evaluate(p):
        tape = ctx.backward(target, C, params=p if use_beta else _no_beta(p),
                            record=True)
        A, b = sign * tape.A, sign * tape.b
        value, G_A, G_b = objective_and_grad(A, b, X, weights, side, inside)
        return tape, A, b, value, sign * G_A, sign * G_b

    tape, A, b, value, G_A, G_b = evaluate(params)
    best = (value, params.copy(), A, b, tape)
    initial = value
    step = lr
    for _ in range(iterations if has_free else 0):
        g_alpha, g_beta = ctx.gradient(tape, target, G_A, G_b)
        for q in range(ctx.n_relu):
            params.alpha[q] = np.clip(params.alpha[q] + step * g_alpha[q], 0, 1)
            if use_beta and params.beta[q].size:
                params.beta[q] = np.maximum(params.beta[q] + step * g_beta[q], 0)
        step *= decay
        tape, A, b, value, G_A, G_b = evaluate(params)
        if value > best[0]:
            best = (value, params.copy(), A, b, tape)
    value, params, A, b, tape = best
    # coefficients on each relu output, used by the relaxation-based heuristics
    coeffs = {step[0]: sign * step[1] for step in tape.steps}
    return OptResult(params, A, b, value, initial, coeffs)


def _no_beta(p):
    return RelaxParams(p.alpha, [np.zeros_like(b) for b in p.beta])
