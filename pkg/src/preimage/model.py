"""Feed-forward ReLU networks: loading, evaluation and output specifications.

Activations are stored channels-last, so an image input has shape
``(H, W, C)`` and its flat vector form is the C-order ravel of that array.
Convolution kernels use ``(out_channels, in_channels, height, width)``.
"""
import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

# blocks with more entries than this stay sparse in bound propagation
DENSE_LIMIT = 4_000_000


class ModelError(ValueError):
    """Raised for malformed or unsupported model files."""


def _size(shape):
    return int(np.prod(shape, dtype=np.int64))


class Dense:
    kind = "dense"

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ModelError("dense weight must be a matrix")
        if self.bias.shape != (self.weight.shape[0],):
            raise ModelError(
                f"dense bias has length {self.bias.size}, "
                f"expected {self.weight.shape[0]}")

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ModelError(
                f"dense layer needs a flat input, got shape {tuple(in_shape)}")
        if in_shape[0] != self.weight.shape[1]:
            raise ModelError(
                f"dense weight has {self.weight.shape[1]} columns, "
                f"input has {in_shape[0]} values")
        return (self.weight.shape[0],)

    def forward(self, X):
        return X @ self.weight.T + self.bias

    def matrix(self, in_shape):
        return self.weight, self.bias

    def to_json(self):
        return {"kind": "dense", "weight": self.weight.tolist(),
                "bias": self.bias.tolist()}


class Conv2d:
    kind = "conv2d"

    def __init__(self, kernel, bias=None, stride=1, padding=0):
        self.kernel = np.asarray(kernel, dtype=np.float64)
        if self.kernel.ndim != 4:
            raise ModelError("conv2d kernel must have 4 dimensions (O, I, H, W)")
        out_ch = self.kernel.shape[0]
        self.bias = (np.zeros(out_ch) if bias is None
                     else np.asarray(bias, dtype=np.float64))
        if self.bias.shape != (out_ch,):
            raise ModelError(
                f"conv2d bias has length {self.bias.size}, expected {out_ch}")
        self.stride = int(stride)
        self.padding = int(padding)
        if self.stride < 1 or self.padding < 0:
            raise ModelError("conv2d needs stride >= 1 and padding >= 0")

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ModelError(
                f"conv2d needs an (H, W, C) input, got shape {tuple(in_shape)}")
        h, w, c = in_shape
        o, i, kh, kw = self.kernel.shape
        if c != i:
            raise ModelError(f"conv2d expects {i} input channels, got {c}")
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ModelError("conv2d kernel is larger than its padded input")
        return (oh, ow, o)

    def forward(self, X):
        p, s = self.padding, self.stride
        _, _, kh, kw = self.kernel.shape
        if p:
            X = np.pad(X, ((0, 0), (p, p), (p, p), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(X, (kh, kw), axis=(1, 2))
        win = win[:, ::s, ::s]
        return np.einsum("nhwcij,ocij->nhwo", win, self.kernel) + self.bias

    def matrix(self, in_shape):
        h, w, c = in_shape
        oh, ow, o = self.out_shape(in_shape)
        _, _, kh, kw = self.kernel.shape
        # one entry per (output pixel, out channel, in channel, kernel row, col)
        Y, X, O, C, I, J = np.meshgrid(np.arange(oh), np.arange(ow),
                                       np.arange(o), np.arange(c),
                                       np.arange(kh), np.arange(kw),
                                       indexing="ij")
        src_h = Y * self.stride - self.padding + I
        src_w = X * self.stride - self.padding + J
        ok = (src_h >= 0) & (src_h < h) & (src_w >= 0) & (src_w < w)
        rows = ((Y * ow + X) * o + O)[ok]
        cols = ((src_h * w + src_w) * c + C)[ok]
        vals = self.kernel[O[ok], C[ok], I[ok], J[ok]]
        mat = sp.csr_matrix((vals, (rows, cols)), shape=(oh * ow * o, h * w * c))
        return mat, np.tile(self.bias, oh * ow)

    def to_json(self):
        return {"kind": "conv2d", "kernel": self.kernel.tolist(),
                "bias": self.bias.tolist(), "stride": self.stride,
                "padding": self.padding}


class AvgPool2d:
    kind = "avgpool2d"

    def __init__(self, window, stride=None):
        self.window = int(window)
        self.stride = int(stride) if stride is not None else self.window
        if self.window < 1 or self.stride < 1:
            raise ModelError("avgpool2d needs window and stride >= 1")

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ModelError(
                f"avgpool2d needs an (H, W, C) input, got shape {tuple(in_shape)}")
        h, w, c = in_shape
        oh = (h - self.window) // self.stride + 1
        ow = (w - self.window) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ModelError("avgpool2d window is larger than its input")
        return (oh, ow, c)

    def forward(self, X):
        k, s = self.window, self.stride
        win = np.lib.stride_tricks.sliding_window_view(X, (k, k), axis=(1, 2))
        return win[:, ::s, ::s].mean(axis=(-2, -1))

    def matrix(self, in_shape):
        h, w, c = in_shape
        oh, ow, _ = self.out_shape(in_shape)
        k = self.window
        Y, X, C, I, J = np.meshgrid(np.arange(oh), np.arange(ow), np.arange(c),
                                    np.arange(k), np.arange(k), indexing="ij")
        rows = ((Y * ow + X) * c + C).ravel()
        cols = (((Y * self.stride + I) * w + X * self.stride + J) * c + C).ravel()
        vals = np.full(rows.size, 1.0 / (k * k))
        mat = sp.csr_matrix((vals, (rows, cols)), shape=(oh * ow * c, h * w * c))
        return mat, np.zeros(oh * ow * c)

    def to_json(self):
        return {"kind": "avgpool2d", "window": self.window, "stride": self.stride}


class Flatten:
    kind = "flatten"

    def out_shape(self, in_shape):
        return (_size(in_shape),)

    def forward(self, X):
        return X.reshape(X.shape[0], -1)

    def matrix(self, in_shape):
        return None, None

    def to_json(self):
        return {"kind": "flatten"}


class ReLU:
    kind = "relu"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, X):
        return np.maximum(X, 0.0)

    def to_json(self):
        return {"kind": "relu"}


_LAYER_KINDS = {
    "dense": lambda d: Dense(d["weight"], d["bias"]),
    "conv2d": lambda d: Conv2d(d["kernel"], d.get("bias"), d.get("stride", 1),
                               d.get("padding", 0)),
    "avgpool2d": lambda d: AvgPool2d(d["window"], d.get("stride")),
    "flatten": lambda d: Flatten(),
    "relu": lambda d: ReLU(),
}


@dataclass(frozen=True)
class Block:
    """Affine map ``z = W h + b`` between two ReLU layers (flat vectors)."""
    weight: object  # ndarray or scipy sparse matrix
    bias: np.ndarray

    @property
    def shape(self):
        return self.weight.shape


class Network:
    """An immutable layered feed-forward network."""

    def __init__(self, layers, input_shape):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        if not self.input_shape or min(self.input_shape) < 1:
            raise ModelError(f"invalid input_shape {list(input_shape)}")
        shapes = [self.input_shape]
        for idx, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.out_shape(shapes[-1])))
            except ModelError as err:
                raise ModelError(f"layer {idx} ({layer.kind}): {err}") from None
        if len(shapes[-1]) != 1:
            raise ModelError(
                f"network output must be flat, got shape {shapes[-1]}")
        self.shapes = tuple(shapes)
        self._blocks = None

    @property
    def input_dim(self):
        return _size(self.input_shape)

    @property
    def output_dim(self):
        return self.shapes[-1][0]

    @property
    def relu_sizes(self):
        return [_size(self.shapes[i]) for i, layer in enumerate(self.layers)
                if layer.kind == "relu"]

    def _as_batch(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1 and X.size == self.input_dim:
            X = X[None]
        if X.ndim == 2 and X.shape[1] == self.input_dim:
            return X.reshape((X.shape[0],) + self.input_shape)
        if X.shape[1:] == self.input_shape:
            return X
        raise ValueError(
            f"input of shape {X.shape} does not match input_shape "
            f"{self.input_shape}")

    def run(self, X):
        """Evaluate a batch, returning ``(outputs, pre_activations)``.

        ``pre_activations`` holds one ``(N, n)`` array per ReLU layer with the
        flattened values entering that layer.
        """
        H = self._as_batch(X)
        pre = []
        for layer in self.layers:
            if layer.kind == "relu":
                pre.append(H.reshape(H.shape[0], -1))
            H = layer.forward(H)
        return H.reshape(H.shape[0], -1), pre

    def evaluate(self, X):
        return self.run(X)[0]

    def blocks(self):
        """Affine blocks between ReLUs, with conv/pool expanded to matrices.

        For ``R`` ReLU layers there are ``R + 1`` blocks; block ``r`` maps the
        output of ReLU ``r - 1`` (or the input, for ``r = 0``) to the values
        entering ReLU ``r`` (or the network output, for ``r = R``).
        """
        if self._blocks is None:
            self._blocks = tuple(self._build_blocks())
        return self._blocks

    def _build_blocks(self):
        blocks = []
        W = b = None
        dim = self.input_dim
        for idx, layer in enumerate(self.layers):
            if layer.kind == "relu":
                blocks.append(_finish_block(W, b, dim))
                W = b = None
                dim = _size(self.shapes[idx])
                continue
            M, c = layer.matrix(self.shapes[idx])
            if M is None:
                continue
            if W is None:
                W, b = M, c
            else:
                W, b = M @ W, M @ b + c
        blocks.append(_finish_block(W, b, dim))
        return blocks

    def to_json(self):
        return {"input_shape": list(self.input_shape),
                "layers": [layer.to_json() for layer in self.layers]}


def _finish_block(W, b, dim):
    if W is None:
        W, b = sp.identity(dim, format="csr"), np.zeros(dim)
    if sp.issparse(W) and W.shape[0] * W.shape[1] <= DENSE_LIMIT:
        W = W.toarray()
    return Block(W, np.asarray(b, dtype=np.float64))


def load_model(data):
    """Parse a JSON model (bytes, str or already-decoded dict) into a Network."""
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as err:
            raise ModelError(f"malformed model file: {err}") from None
    if not isinstance(data, dict) or "input_shape" not in data \
            or "layers" not in data:
        raise ModelError("model file needs 'input_shape' and 'layers'")
    layers = []
    for idx, spec in enumerate(data["layers"]):
        kind = spec.get("kind") if isinstance(spec, dict) else None
        if kind not in _LAYER_KINDS:
            raise ModelError(f"layer {idx}: unsupported layer kind {kind!r}")
        try:
            layers.append(_LAYER_KINDS[kind](spec))
        except ModelError as err:
            raise ModelError(f"layer {idx} ({kind}): {err}") from None
        except (KeyError, TypeError, ValueError) as err:
            raise ModelError(f"layer {idx} ({kind}): malformed ({err})") from None
    return Network(layers, data["input_shape"])


def load_model_file(path):
    with open(path, "rb") as fh:
        return load_model(fh.read())


def forward(net, x):
    """Exact network output for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.size != net.input_dim:
        raise ValueError(
            f"input has {x.size} values, network expects {net.input_dim}")
    return net.evaluate(x.reshape(1, -1))[0]


def pre_activations(net, X):
    """Per-ReLU-layer pre-activation values for a nonempty batch."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    return net.run(X)[1]


@dataclass(frozen=True)
class OutputSpec:
    """Polytope ``{y : C y + d >= 0}`` over network outputs."""
    C: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        d = np.asarray(self.d, dtype=np.float64).reshape(-1)
        if C.shape[0] < 1 or C.shape[0] != d.size:
            raise ValueError("output spec needs K >= 1 rows and K offsets")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "d", d)

    @property
    def K(self):
        return self.C.shape[0]

    @classmethod
    def from_json(cls, data):
        if isinstance(data, (str, bytes)):
            data = json.loads(data)
        return cls(data["C"], data["d"])

    def to_json(self):
        return {"C": self.C.tolist(), "d": self.d.tolist()}


def class_dominance_spec(label, m):
    """Rows ``e_label - e_j`` for every other class ``j``."""
    if not 0 <= label < m:
        raise ValueError(f"label {label} out of range for {m} outputs")
    rows = [np.eye(m)[label] - np.eye(m)[j] for j in range(m) if j != label]
    return OutputSpec(np.array(rows), np.zeros(m - 1))


def append_output_spec(net, spec):
    """Network computing ``C f(x) + d``; the input network is left untouched."""
    if spec.C.shape[1] != net.output_dim:
        raise ValueError(
            f"spec has {spec.C.shape[1]} columns, network has "
            f"{net.output_dim} outputs")
    return Network(net.layers + (Dense(spec.C, spec.d),), net.input_shape)
