"""Subdomains of the input box: ReLU splits and bound tightening."""
from dataclasses import dataclass, field, replace

import numpy as np

from .relax import BoundContext, backward_bounds, interval_bounds

# relative slack added to every reverse-tightened bound
TIGHTEN_SLACK = 1e-10


@dataclass(frozen=True, eq=False)
class HalfSpaceRegion:
    """``{x : A x + b >= 0 on every row}``, tagged with the approximation side."""
    A: np.ndarray
    b: np.ndarray
    side: str = "under"

    @classmethod
    def everything(cls, d, side):
        return cls(np.zeros((1, d)), np.ones(1), side)

    @classmethod
    def nothing(cls, d, side):
        return cls(np.zeros((1, d)), -np.ones(1), side)

    def satisfied(self, X):
        X = np.atleast_2d(X)
        return np.all(X @ self.A.T + self.b >= 0, axis=1)

    def to_json(self):
        return {"A": self.A.tolist(), "b": self.b.tolist(), "side": self.side}


@dataclass(frozen=True, eq=False)
class Subdomain:
    lo: np.ndarray
    hi: np.ndarray
    splits: tuple = ()
    lbs: tuple = ()
    ubs: tuple = ()
    volume_chain: tuple = ()
    path: tuple = ()
    feasible: bool = True
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ValueError("subdomain box has lower > upper")
        seen = {(l, i) for l, i, _ in self.splits}
        if len(seen) != len(self.splits):
            raise ValueError("a neuron appears twice in the split history")

    def is_split(self, layer, neuron):
        return any(l == layer and i == neuron for l, i, _ in self.splits)

    def context(self, blocks):
        return BoundContext(blocks, self.lo, self.hi, self.lbs, self.ubs,
                            self.splits)

    def unstable(self, blocks):
        """Per-layer masks of unstable, not yet split neurons."""
        ctx = self.context(blocks)
        masks = []
        for q in range(ctx.n_relu):
            m = ctx.unstable(q).copy()
            idx = [i for l, i, _ in self.splits if l == q]
            m[idx] = False
            masks.append(m)
        return masks


def root_domain(blocks, lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    lbs, ubs, _ = interval_bounds(blocks, lo, hi)
    return Subdomain(lo, hi, (), tuple(lbs), tuple(ubs))


def split_neuron(dom, X, layer, neuron):
    """Split on the sign of one unstable neuron.

    Returns ``(dom_neg, X_neg, dom_pos, X_pos)``; samples are partitioned by
    their cached pre-activation, ``z < 0`` going to the negative child.  Each
    child's volume chain grows by its weighted share of the samples.
    """
    lb, ub = dom.lbs[layer][neuron], dom.ubs[layer][neuron]
    if dom.is_split(layer, neuron):
        raise ValueError(f"neuron ({layer}, {neuron}) is already split")
    if not (lb < 0 < ub):
        raise ValueError(f"neuron ({layer}, {neuron}) is stable on this domain")
    neg = X.pre[layer][:, neuron] < 0
    total = X.weights.sum()
    share_neg = X.weights[neg].sum() / total if total > 0 else 0.0
    children = []
    for sign, mask, share, bit in (("-", neg, share_neg, 0),
                                   ("+", ~neg, 1.0 - share_neg, 1)):
        lbs = list(dom.lbs)
        ubs = list(dom.ubs)
        if sign == "-":
            ubs[layer] = ubs[layer].copy()
            ubs[layer][neuron] = 0.0
        else:
            lbs[layer] = lbs[layer].copy()
            lbs[layer][neuron] = 0.0
        child = Subdomain(dom.lo, dom.hi, dom.splits + ((layer, neuron, sign),),
                          tuple(lbs), tuple(ubs),
                          dom.volume_chain + (float(share),), dom.path + (bit,))
        children += [child, X.subset(mask)]
    return tuple(children)


def tighten_interval(row, offset, lo, hi, sign):
    """Tighten ``[lo, hi]`` using one linear bound row and a split sign.

    For ``sign="-"`` the row is a lower bound ``row . z + offset`` of a neuron
    known to be negative; for ``sign="+"`` it is an upper bound of a neuron
    known to be nonnegative.  Bounds only ever shrink.
    """
    row = np.asarray(row, dtype=np.float64)
    lo = np.array(lo, dtype=np.float64)
    hi = np.array(hi, dtype=np.float64)
    a_lo, a_hi = row * lo, row * hi
    if sign == "-":
        terms = np.minimum(a_lo, a_hi)
    else:
        terms = np.maximum(a_lo, a_hi)
    rest = terms.sum() - terms  # c_j: sum over k != j
    nz = row != 0
    cand = np.full(row.shape, np.nan)
    cand[nz] = -(rest[nz] + offset) / row[nz]
    slack = TIGHTEN_SLACK * (1 + np.abs(cand))
    if sign == "-":
        raise_lo = nz & (row < 0)
        lower_hi = nz & (row > 0)
    else:
        raise_lo = nz & (row > 0)
        lower_hi = nz & (row < 0)
    lo[raise_lo] = np.maximum(lo[raise_lo], cand[raise_lo] - slack[raise_lo])
    hi[lower_hi] = np.minimum(hi[lower_hi], cand[lower_hi] + slack[lower_hi])
    return lo, hi


def split_linear_bounds(dom, blocks, layer, neuron, targets):
    """LinearBounds of the split neuron w.r.t. each layer in ``targets``."""
    ctx = dom.context(blocks)
    return {m: backward_bounds(ctx, layer, rows=[neuron], to=m)
            for m in targets}


def reverse_targets(layer, depth="prev"):
    """Layers whose bounds reverse tightening updates after splitting ``layer``."""
    if depth == "all":
        return ["input"] + list(range(layer))
    if depth == "input":
        return ["input"]
    return ["input"] + ([layer - 1] if layer > 0 else [])


def tighten_reverse(dom, layer, neuron, sign, linear):
    """Propagate the split constraint back to earlier layers and the input.

    ``linear`` maps each target (``"input"`` or a layer index below
    ``layer``) to the LinearBounds of the split neuron w.r.t. that layer.
    Returns the updated subdomain; ``feasible`` is False when some interval
    became empty.
    """
    if not linear:
        raise ValueError("no linear bounds available for reverse tightening")
    lo, hi = dom.lo, dom.hi
    lbs, ubs = list(dom.lbs), list(dom.ubs)
    feasible = True
    for m, lin in linear.items():
        if sign == "-":
            row, off = lin.A_lower[0], lin.b_lower[0]
        else:
            row, off = lin.A_upper[0], lin.b_upper[0]
        if m == "input":
            cur_lo, cur_hi = lo, hi
        else:
            if not 0 <= m < layer:
                raise ValueError(f"layer {m} does not precede layer {layer}")
            cur_lo, cur_hi = lbs[m], ubs[m]
        new_lo, new_hi = tighten_interval(row, off, cur_lo, cur_hi, sign)
        if np.any(new_lo > new_hi):
            feasible = False
            new_lo = np.minimum(new_lo, new_hi)
        if m == "input":
            lo, hi = new_lo, new_hi
        else:
            lbs[m], ubs[m] = new_lo, new_hi
    return replace(dom, lo=lo, hi=hi, lbs=tuple(lbs), ubs=tuple(ubs),
                   feasible=dom.feasible and feasible)


def refresh_forward(blocks, dom):
    """Recompute every layer's interval from the (tightened) box; never widens."""
    lbs, ubs, feasible = interval_bounds(blocks, dom.lo, dom.hi, dom.splits,
                                         dom.lbs, dom.ubs)
    return replace(dom, lbs=tuple(lbs), ubs=tuple(ubs),
                   feasible=dom.feasible and feasible)


def consistent(dom, pre, n):
    """Which of ``n`` samples satisfy every split sign of ``dom``."""
    ok = np.ones(n, dtype=bool)
    for layer, neuron, sign in dom.splits:
        z = pre[layer][:, neuron]
        ok &= (z < 0) if sign == "-" else (z >= 0)
    return ok


def contains(region, dom, X, pre):
    """Membership of points in ``region`` restricted to the subdomain's splits."""
    X = np.atleast_2d(X)
    return region.satisfied(X) & consistent(dom, pre, X.shape[0])
