import math

import numpy as np
import pytest

from preimage.model import (AvgPool2d, Conv2d, Dense, Flatten, Network, ReLU,
                            OutputSpec)
from preimage.relax import (BoundContext, interval_bounds, objective,
                            objective_and_grad)


def random_dense_net(rng, d, widths, m, scale=1.0):
    """Dense ReLU net with He-style random weights."""
    layers = []
    prev = d
    for w in widths:
        layers += [Dense(rng.normal(size=(w, prev)) * scale / np.sqrt(prev),
                         rng.normal(size=w) * 0.3), ReLU()]
        prev = w
    layers.append(Dense(rng.normal(size=(m, prev)) / np.sqrt(prev),
                        rng.normal(size=m) * 0.1))
    return Network(layers, [d])


def random_conv_net(rng, hw=5, cin=1, cout=2, m=3):
    layers = [
        Conv2d(rng.normal(size=(cout, cin, 3, 3)) / 3, rng.normal(size=cout) * 0.1,
               stride=1, padding=1),
        ReLU(),
        AvgPool2d(2),
        Flatten(),
    ]
    side = hw // 2
    flat = side * side * cout
    layers += [Dense(rng.normal(size=(6, flat)) / np.sqrt(flat),
                     rng.normal(size=6) * 0.1), ReLU(),
               Dense(rng.normal(size=(m, 6)) / np.sqrt(6), np.zeros(m))]
    return Network(layers, [hw, hw, cin])


def toy_2d_net(seed):
    """Small two-input classifier with a curved decision boundary."""
    rng = np.random.default_rng(seed)
    return random_dense_net(rng, 2, [10, 10], 2, scale=2.0)


def grid_points(lo, hi, k=1000):
    """Cell centres of a k x k grid on a 2-D box."""
    xs = lo[0] + (np.arange(k) + 0.5) * (hi[0] - lo[0]) / k
    ys = lo[1] + (np.arange(k) + 0.5) * (hi[1] - lo[1]) / k
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def leaf_membership(leaf_splits, pre):
    here = np.ones(pre[0].shape[0] if pre else 0, dtype=bool)
    for layer, neuron, sign in leaf_splits:
        z = pre[layer][:, neuron]
        here &= (z < 0) if sign == "-" else (z >= 0)
    return here


def context(net, lo, hi, splits=()):
    blocks = net.blocks()
    lbs, ubs, feasible = interval_bounds(blocks, lo, hi, splits)
    return BoundContext(blocks, lo, hi, lbs, ubs, splits), feasible


def unstable_neurons(ctx):
    return [(q, int(i)) for q in range(ctx.n_relu)
            for i in np.flatnonzero(ctx.unstable(q))]


def fd_gradient_errors(ctx, X, w, side, inside, rng):
    """Norm-relative error of the alpha and beta gradients vs central differences."""
    target = ctx.n_relu
    K = ctx.blocks[target].bias.size
    sign = 1.0 if side == "under" else -1.0
    C = sign * np.eye(K)
    params = ctx.init_params(K)
    for q in range(ctx.n_relu):
        params.alpha[q] = rng.uniform(0.2, 0.8, size=params.alpha[q].shape)
        params.beta[q] = rng.uniform(0.1, 1.0, size=params.beta[q].shape)

    def value(p):
        tape = ctx.backward(target, C, params=p)
        return objective(sign * tape.A, sign * tape.b, X, w, side, inside)

    tape = ctx.backward(target, C, params=params, record=True)
    _, G_A, G_b = objective_and_grad(sign * tape.A, sign * tape.b, X, w, side,
                                     inside)
    g_alpha, g_beta = ctx.gradient(tape, target, sign * G_A, sign * G_b)
    h = 1e-5
    errors = {}
    for kind, grads in (("alpha", g_alpha), ("beta", g_beta)):
        got, want = [], []
        for q in range(ctx.n_relu):
            arr = getattr(params, kind)[q]
            for idx in np.ndindex(arr.shape):
                if kind == "alpha" and not ctx.unstable(q)[idx[1]]:
                    continue
                p_plus, p_minus = params.copy(), params.copy()
                getattr(p_plus, kind)[q][idx] += h
                getattr(p_minus, kind)[q][idx] -= h
                want.append((value(p_plus) - value(p_minus)) / (2 * h))
                got.append(grads[q][idx])
        if want:
            got, want = np.array(got), np.array(want)
            scale = np.linalg.norm(want)
            if scale > 1e-8:
                errors[kind] = np.linalg.norm(got - want) / scale
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def scalar_relu_net():
    """f(x) = relu(x) on a scalar input."""
    return Network([Dense([[1.0]], [0.0]), ReLU(), Dense([[1.0]], [0.0])], [1])


@pytest.fixture
def dominance_spec():
    return OutputSpec([[1.0, -1.0]], [0.0])


def straight_line_scores(z, lb, ub, A):
    """Plain-loop evaluation of the ten neuron scores, one dict per neuron."""
    n, c = len(z), len(lb)
    K = len(A)
    rows = []
    for i in range(c):
        col = [z[j][i] for j in range(n)]
        lo, hi = lb[i], ub[i]
        pos = sum(1 for v in col if v >= 0)
        sig = sum(1 / (1 + math.exp(-v)) for v in col)
        spread = max(col) - min(col)
        negs = [v for v in col if v < 0]
        rows.append({
            "balance": 1 - abs(2 * pos / n - 1),
            "soft": 1 - abs(2 * sig / n - 1),
            "lower": max(-lo, 0.0),
            "width": hi - lo,
            "loose": hi - lo - spread,
            "bound": 1 - spread / (hi - lo),
            "gap": -lo * hi / (hi - lo),
            "area": sum(abs(A[k][i] * lo * lo) for k in range(K)),
            "under": sum(abs(A[k][i] * lo) for k in range(K)),
            "extra": (sum(abs(A[k][i] * v) for k in range(K) for v in negs)
                      / len(negs)) if negs else 0.0,
        })
    return rows


def straight_line_select(z, lb, ub, A, weights):
    """Index of the neuron chosen by the weighted, normalized score sum."""
    rows = straight_line_scores(z, lb, ub, A)
    order = ["balance", "soft", "lower", "width", "loose", "bound", "gap",
             "area", "under", "extra"]
    on_unit_scale = {"balance", "soft", "bound"}
    totals = [0.0] * len(rows)
    for name in order:
        w = weights.get(name, 0.0)
        if w == 0:
            continue
        top = max(r[name] for r in rows)
        for i, r in enumerate(rows):
            if name in on_unit_scale:
                v = r[name]
            else:
                v = r[name] / top if top > 0 else 0.0
            totals[i] += w * v
    best = 0
    for i in range(1, len(totals)):
        if totals[i] > totals[best]:
            best = i
    return best


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
