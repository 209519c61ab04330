"""Branch-and-refine preimage approximation.

The input box is split on ReLU signs; every leaf carries a half-space plane
built from optimised linear bounds of the specification outputs.  The union
of the leaf planes, each restricted to its leaf's sign pattern, is a sound
under- (or over-) approximation of the preimage at every iteration.

Randomness is drawn from streams keyed by the master seed and a leaf's split
path, so results do not depend on processing order or parallelism.
"""
import heapq
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import (HalfSpaceRegion, refresh_forward,
                     reverse_targets, root_domain, split_linear_bounds,
                     split_neuron, tighten_reverse)
from .heuristics import HeuristicConfig, select_neuron
from .model import append_output_spec
from .relax import optimize_params
from . import sampler, stats

log = logging.getLogger(__name__)

MODES = ("under", "over")
STABILIZE_DEPTH = 10
ROOT_OVERSAMPLE = 5

# random stream purposes
_ROOT, _REPLENISH, _FILL, _SPLIT, _LEAF = range(5)


@dataclass
class RunConfig:
    mode: str = "under"
    threshold: float = None
    samples: int = 2000
    time_limit: float = 600.0
    max_iterations: int = None
    batch: int = 2
    heuristics: HeuristicConfig = field(default_factory=HeuristicConfig)
    bootstrap: int = stats.DEFAULT_B
    level: float = stats.DEFAULT_LEVEL
    weight_fn: object = None
    seed: int = 0
    shortcuts: bool = True
    tighten: bool = True
    beta: bool = True
    reverse_depth: str = "prev"
    opt_iterations: int = 20
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.threshold is None:
            self.threshold = 0.9 if self.mode == "under" else 1.1
        if self.mode == "under" and not self.threshold < 1:
            raise ValueError("under-approximation threshold must be below 1")
        if self.mode == "over" and not self.threshold > 1:
            raise ValueError("over-approximation threshold must be above 1")
        if self.samples < 1 or self.batch < 1 or self.workers < 1:
            raise ValueError("samples, batch and workers must be positive")
        if self.bootstrap and self.bootstrap < 100:
            raise ValueError("bootstrap needs B >= 100 (or 0 to disable)")
        if not 0 < self.level < 1:
            raise ValueError("confidence level must lie in (0, 1)")
        if self.reverse_depth not in ("prev", "all", "input"):
            raise ValueError("reverse_depth must be prev, all or input")
        if isinstance(self.heuristics, dict):
            self.heuristics = HeuristicConfig(dict(self.heuristics))

    def to_json(self):
        wf = self.weight_fn
        return {
            "mode": self.mode, "threshold": self.threshold,
            "samples": self.samples, "time_limit": self.time_limit,
            "max_iterations": self.max_iterations, "batch": self.batch,
            "heuristics": self.heuristics.to_json(),
            "bootstrap": self.bootstrap, "level": self.level,
            "weight_fn": None if wf is None else wf.to_json(),
            "seed": self.seed, "shortcuts": self.shortcuts,
            "tighten": self.tighten, "beta": self.beta,
            "reverse_depth": self.reverse_depth,
            "opt_iterations": self.opt_iterations,
        }


@dataclass(eq=False)
class Leaf:
    dom: object
    samples: object
    plane: HalfSpaceRegion
    status: str            # open, exact, discarded, finalized, empty
    root_idx: np.ndarray   # indices of root samples routed to this leaf
    coeffs: dict = None
    chain_reps: np.ndarray = None
    f_P: float = 0.0
    f_O: float = 0.0
    fP_reps: np.ndarray = None
    fO_reps: np.ndarray = None
    uid: int = -1

    @property
    def path(self):
        return self.dom.path

    @property
    def is_open(self):
        return self.status == "open"


@dataclass
class Result:
    leaves: list
    trace: list
    stop_reason: str
    iterations: int
    optimizer_calls: int
    box_volume: float
    estimate: stats.VolumeEstimate
    config: RunConfig
    lo: np.ndarray
    hi: np.ndarray
    ess_fraction: float
    elapsed: float

    def to_document(self, extra=None):
        """JSON-ready result; ``timings`` is the only run-dependent field."""
        leaves = []
        for leaf in self.leaves:
            vol = leaf_volume(self.box_volume, leaf.dom)
            leaves.append({
                "path": list(leaf.path),
                "splits": [[l, i, s] for l, i, s in leaf.dom.splits],
                "status": leaf.status,
                "plane": leaf.plane.to_json(),
                "volume_chain": list(leaf.dom.volume_chain),
                "volume": vol,
                "samples": len(leaf.samples),
                "f_P": leaf.f_P, "f_O": leaf.f_O,
                "v_P": vol * leaf.f_P, "v_O": vol * leaf.f_O,
            })
        est = self.estimate
        doc = {
            "config": self.config.to_json(),
            "domain": {"lower": self.lo.tolist(), "upper": self.hi.tolist()},
            "leaves": leaves,
            "totals": {
                "box_volume": self.box_volume,
                "v_P": est.v_P, "v_O": est.v_O, "ratio": est.ratio,
                "ci_P": _ci(est.ci_P), "ci_O": _ci(est.ci_O),
                "ci_ratio": _ci(est.ci_ratio),
            },
            "stop_reason": self.stop_reason,
            "iterations": self.iterations,
            "optimizer_calls": self.optimizer_calls,
            "ess_fraction": self.ess_fraction,
            "timings": {"elapsed_s": self.elapsed},
        }
        if extra:
            doc.update(extra)
        return doc


def _ci(ci):
    return None if ci is None else [ci[0], ci[1]]


def leaf_volume(box_vol, dom):
    return box_vol * math.prod(dom.volume_chain)


def _empty_plane(d, mode):
    """Plane for a leaf judged empty: excludes everything (under) or nothing (over)."""
    if mode == "under":
        return HalfSpaceRegion.nothing(d, mode)
    return HalfSpaceRegion.everything(d, mode)


class Engine:
    """State shared by all leaves of one run."""

    def __init__(self, net, lo, hi, spec, config):
        self.config = config
        self.net = append_output_spec(net, spec)
        self.blocks = self.net.blocks()
        self.lo = np.asarray(lo, dtype=np.float64).reshape(-1)
        self.hi = np.asarray(hi, dtype=np.float64).reshape(-1)
        if self.lo.size != net.input_dim or self.hi.size != net.input_dim:
            raise ValueError(
                f"domain has {self.lo.size} coordinates, network expects "
                f"{net.input_dim}")
        if np.any(self.lo > self.hi):
            raise ValueError("infeasible input domain (lower > upper)")
        self.box_volume = stats.box_volume(self.lo, self.hi)
        self.d = self.lo.size
        self.mode = config.mode
        self.B = config.bootstrap
        self.root_samples = None

    # -- randomness --------------------------------------------------------
    def rng(self, purpose, path):
        key = (purpose, len(path)) + tuple(path)
        return np.random.default_rng(
            np.random.SeedSequence(self.config.seed, spawn_key=key))

    # -- planes ------------------------------------------------------------
    def _coverage(self, plane, X, root_idx):
        """(root-sample coverage, leaf-sample coverage), both weighted."""
        R = self.root_samples
        root = 0.0
        if len(root_idx):
            hit = plane.satisfied(R.points[root_idx])
            root = float(R.weights[root_idx][hit].sum())
        own = float(X.weights[plane.satisfied(X.points)].sum()) if len(X) else 0.0
        return root, own

    def merge(self, candidate, parent, X, root_idx):
        """Keep the parent's plane when it covers more (under) or less (over)."""
        if parent is None:
            return candidate
        new = self._coverage(candidate, X, root_idx)
        old = self._coverage(parent, X, root_idx)
        if self.mode == "under":
            return candidate if new >= old else parent
        return candidate if new <= old else parent

    def approximate(self, dom, X):
        """Optimise the relaxation on the leaf's samples and return the plane."""
        ctx = dom.context(self.blocks)
        inside = X.inside if self.mode == "over" else None
        weights = X.weights
        if self.mode == "over" and not np.any(weights[~inside] > 0):
            # no outside samples to exclude: keep the initial relaxation
            res = optimize_params(ctx, X.points, np.ones(len(X)), self.mode,
                                  None, iterations=0, use_beta=self.config.beta)
        else:
            res = optimize_params(ctx, X.points, weights, self.mode, inside,
                                  iterations=self.config.opt_iterations,
                                  use_beta=self.config.beta)
        return HalfSpaceRegion(res.A, res.b, self.mode), res.coeffs

    def plain_plane(self, dom):
        """Unoptimised bound plane, usable without samples."""
        ctx = dom.context(self.blocks)
        K = self.blocks[-1].bias.size
        sign = 1.0 if self.mode == "under" else -1.0
        tape = ctx.backward(ctx.n_relu, sign * np.eye(K))
        return HalfSpaceRegion(sign * tape.A, sign * tape.b, self.mode)

    # -- leaf statistics ---------------------------------------------------
    def finish(self, leaf):
        """Fill in the leaf's point estimates and bootstrap replicates."""
        X = leaf.samples
        if len(X) and X.total_weight > 0:
            in_P = leaf.plane.satisfied(X.points)
            in_O = X.inside
            leaf.f_P = stats.weighted_fraction(X.weights, in_P)
            leaf.f_O = stats.weighted_fraction(X.weights, in_O)
            if self.B:
                reps = stats.resampled_fractions(
                    X.weights, [in_P, in_O], self.B,
                    self.rng(_LEAF, leaf.path))
                leaf.fP_reps, leaf.fO_reps = reps
        else:
            # no samples: the leaf counts as covered only if its plane is
            # the whole space
            full = float(np.all(leaf.plane.A == 0) and np.all(leaf.plane.b >= 0))
            leaf.f_P = full
            leaf.f_O = 0.0 if self.mode == "under" else full
            if self.B:
                leaf.fP_reps = np.full(self.B, leaf.f_P)
                leaf.fO_reps = np.full(self.B, leaf.f_O)
        return leaf

    def leaf_priority(self, leaf):
        vol = leaf_volume(self.box_volume, leaf.dom)
        return stats.priority(vol * leaf.f_P, vol * leaf.f_O)

    # -- bounds ------------------------------------------------------------
    def propagate(self, dom, layer, neuron, sign):
        if self.config.tighten:
            targets = reverse_targets(layer, self.config.reverse_depth)
            linear = split_linear_bounds(dom, self.blocks, layer, neuron,
                                         targets)
            dom = tighten_reverse(dom, layer, neuron, sign, linear)
        return refresh_forward(self.blocks, dom)

    # -- refinement --------------------------------------------------------
    def root(self):
        dom = root_domain(self.blocks, self.lo, self.hi)
        n = ROOT_OVERSAMPLE * self.config.samples
        rng = self.rng(_ROOT, ())
        X = sampler.evaluate(self.net,
                             sampler.sample_uniform(self.lo, self.hi, n, rng),
                             self.config.weight_fn)
        if X.total_weight <= 0:
            raise ValueError("weight function is zero on every root sample")
        self.root_samples = X
        leaf = Leaf(dom, X, None, "open", np.arange(len(X)),
                    chain_reps=np.ones(self.B) if self.B else None)
        opt = self.settle(leaf, parent_plane=None)
        return leaf, opt

    def settle(self, leaf, parent_plane):
        """Choose the plane and status of a freshly created leaf."""
        X = leaf.samples
        opt = 0
        action = (check_shortcut(X, self.mode) if self.config.shortcuts
                  else "proceed")
        if action == "discard":
            cand, leaf.status = _empty_plane(self.d, "under"), "discarded"
        elif action == "finalize":
            cand = HalfSpaceRegion.everything(self.d, "over")
            leaf.status = "finalized"
        else:
            cand, leaf.coeffs = self.approximate(leaf.dom, X)
            opt = 1
            if not any(np.any(m) for m in leaf.dom.unstable(self.blocks)):
                leaf.status = "exact"
        leaf.plane = self.merge(cand, parent_plane, X, leaf.root_idx)
        self.finish(leaf)
        return opt

    def refine(self, leaf):
        """Split one leaf; returns ``(new_leaves, optimizer_calls)``."""
        cfg = self.config
        dom = leaf.dom
        X, _ = sampler.replenish(self.net, dom, leaf.samples, cfg.samples,
                                 self.rng(_REPLENISH, dom.path), cfg.weight_fn)
        choice = select_neuron(dom, self.blocks, X, cfg.heuristics, leaf.coeffs)
        if choice is None:
            done = replace(leaf, samples=X, status="exact")
            self.finish(done)
            return [done], 0
        layer, neuron = choice
        dom_neg, X_neg, dom_pos, X_pos = split_neuron(dom, X, layer, neuron)
        neg = X.pre[layer][:, neuron] < 0
        root_neg = self.root_samples.pre[layer][leaf.root_idx, neuron] < 0
        if self.B:
            f_neg, f_pos = stats.split_replicates(
                X.weights, neg, self.B, self.rng(_SPLIT, dom.path))
            reps = (leaf.chain_reps * f_neg, leaf.chain_reps * f_pos)
        else:
            reps = (None, None)
        out, opt = [], 0
        for child, Xc, sign, chain, ridx in (
                (dom_neg, X_neg, "-", reps[0], leaf.root_idx[root_neg]),
                (dom_pos, X_pos, "+", reps[1], leaf.root_idx[~root_neg])):
            new, calls = self.grow(child, Xc, layer, neuron, sign, chain, ridx,
                                   leaf.plane)
            out += new
            opt += calls
        return out, opt

    def grow(self, dom, X, layer, neuron, sign, chain, root_idx, parent_plane):
        """Bound, sample, stabilise and approximate a new child."""
        cfg = self.config
        dom = self.propagate(dom, layer, neuron, sign)
        if not dom.feasible:
            if len(X) == 0:
                leaf = Leaf(dom, X, HalfSpaceRegion.nothing(self.d, self.mode),
                            "empty", root_idx, chain_reps=chain)
                return [self.finish(leaf)], 0
            # samples prove the branch is not empty: rounding, not infeasibility
            dom = replace(dom, feasible=True)
        X, info = sampler.replenish(self.net, dom, X, cfg.samples,
                                    self.rng(_FILL, dom.path), cfg.weight_fn)
        if len(X) == 0:
            plane = (HalfSpaceRegion.nothing(self.d, self.mode)
                     if not dom.feasible else self.plain_plane(dom))
            leaf = Leaf(dom, X, plane, "empty", root_idx, chain_reps=chain)
            return [self.finish(leaf)], 0
        out = []
        if cfg.shortcuts:
            for _ in range(STABILIZE_DEPTH):
                pick = self._one_sided(dom, X)
                if pick is None:
                    break
                l, i = pick
                d_neg, X_neg, d_pos, X_pos = split_neuron(dom, X, l, i)
                if len(X_neg):
                    keep, gone, s = d_neg, d_pos, "-"
                else:
                    keep, gone, s = d_pos, d_neg, "+"
                zero = np.zeros(self.B) if self.B else None
                side = Leaf(gone, sampler.SampleSet.empty(
                    self.net.input_dim, self.net.relu_sizes, self.net.output_dim),
                    _empty_plane(self.d, self.mode), "empty",
                    root_idx[:0], chain_reps=zero)
                out.append(self.finish(side))
                dom = self.propagate(keep, l, i, s)
                dom = replace(dom, feasible=True)
        leaf = Leaf(dom, X, None, "open", root_idx, chain_reps=chain)
        opt = self.settle(leaf, parent_plane)
        out.append(leaf)
        return out, opt

    def _one_sided(self, dom, X):
        """First unstable neuron whose samples all share one sign."""
        for layer, mask in enumerate(dom.unstable(self.blocks)):
            idx = np.flatnonzero(mask)
            if not idx.size:
                continue
            z = X.pre[layer][:, idx]
            one = np.all(z < 0, axis=0) | np.all(z >= 0, axis=0)
            if one.any():
                return layer, int(idx[np.argmax(one)])
        return None


def _leaf_stats(engine, leaves):
    est = stats.volume_estimates(
        [(leaf_volume(engine.box_volume, l.dom), l.f_P, l.f_O) for l in leaves])
    if engine.B:
        ci_P, ci_O, ci_r = stats.bootstrap_ci(
            [(engine.box_volume, l.chain_reps, l.fP_reps, l.fO_reps)
             for l in leaves], engine.config.level)
        est.ci_P, est.ci_O, est.ci_ratio = ci_P, ci_O, ci_r
    return est


def _coverage(engine, leaves):
    """Weighted share of root samples inside the union of leaf planes."""
    R = engine.root_samples
    covered = 0.0
    for leaf in leaves:
        if len(leaf.root_idx):
            hit = leaf.plane.satisfied(R.points[leaf.root_idx])
            covered += float(R.weights[leaf.root_idx][hit].sum())
    return covered / R.total_weight


def premap2(net, lo, hi, spec, config=None, trace=None):
    """Approximate the preimage of ``spec`` over the box ``[lo, hi]``.

    Parameters
    ----------
    net : Network
    lo, hi : array_like
        Input box, flattened to the network's input dimension.
    spec : OutputSpec
    config : RunConfig, optional
    trace : callable, optional
        Receives one dict per iteration (iteration 0 is the root).

    Returns
    -------
    Result
    """
    config = config or RunConfig()
    start = time.monotonic()
    engine = Engine(net, lo, hi, spec, config)
    root, opt_calls = engine.root()
    ess = sampler.check_ess(engine.root_samples.weights)
    leaves = {root.path: root}
    heap = []
    counter = 0

    def push(leaf):
        nonlocal counter
        leaf.uid = counter
        counter += 1
        if leaf.is_open:
            heapq.heappush(heap, (-engine.leaf_priority(leaf), leaf.uid, leaf))

    push(root)
    records = []
    iteration = 0
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        while True:
            ordered = [leaves[p] for p in sorted(leaves)]
            est = _leaf_stats(engine, ordered)
            rec = {"iteration": iteration,
                   "elapsed_s": time.monotonic() - start,
                   "v_P": est.v_P, "v_O": est.v_O, "ratio": est.ratio,
                   "ci_low": est.ci_ratio[0] if est.ci_ratio else None,
                   "ci_high": est.ci_ratio[1] if est.ci_ratio else None,
                   "leaves": len(ordered),
                   "coverage": _coverage(engine, ordered)}
            records.append(rec)
            if trace is not None:
                trace(rec)
            if _reached(est.ratio, config):
                reason = "threshold"
            elif not heap:
                reason = "exact"
            elif config.max_iterations is not None and \
                    iteration >= config.max_iterations:
                reason = "iterations"
            elif time.monotonic() - start >= config.time_limit:
                reason = "time"
            else:
                reason = None
            if reason:
                break
            batch = [heapq.heappop(heap)[2]
                     for _ in range(min(config.batch, len(heap)))]
            if pool is None:
                results = [engine.refine(leaf) for leaf in batch]
            else:
                results = list(pool.map(engine.refine, batch))
            for leaf in batch:
                del leaves[leaf.path]
            new = []
            for children, calls in results:
                new += children
                opt_calls += calls
            for child in sorted(new, key=lambda l: l.path):
                leaves[child.path] = child
                push(child)
            iteration += 1
    finally:
        if pool is not None:
            pool.shutdown()
    ordered = [leaves[p] for p in sorted(leaves)]
    return Result(ordered, records, reason, iteration, opt_calls,
                  engine.box_volume, est, config, engine.lo, engine.hi,
                  ess / len(engine.root_samples), time.monotonic() - start)


def _reached(ratio, config):
    if config.mode == "under":
        return ratio >= config.threshold
    return ratio <= config.threshold


def trace_writer(fh):
    """Callback writing one JSON line per iteration to an open text file."""
    def write(rec):
        fh.write(json.dumps(rec) + "\n")
        fh.flush()
    return write


def check_shortcut(X, mode):
    """Sample-only decision for a branch: proceed, discard or finalize."""
    inside = X.inside
    if mode == "under" and not inside.any():
        return "discard"
    if mode == "over" and len(X) and inside.all():
        return "finalize"
    return "proceed"

