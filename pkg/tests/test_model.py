import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from preimage.model import (Conv2d, Dense, ModelError, Network, OutputSpec,
                            ReLU, append_output_spec, class_dominance_spec,
                            forward, load_model, pre_activations)

from conftest import random_conv_net, random_dense_net


def _dense_file(rng):
    return {
        "input_shape": [2],
        "layers": [
            {"kind": "flatten"},
            {"kind": "dense", "weight": rng.normal(size=(4, 2)).tolist(),
             "bias": rng.normal(size=4).tolist()},
            {"kind": "relu"},
            {"kind": "dense", "weight": rng.normal(size=(2, 4)).tolist(),
             "bias": rng.normal(size=2).tolist()},
            {"kind": "relu"},
        ],
    }


def straight_line(net_json, x):
    """Plain-Python evaluator for dense/relu/flatten model files."""
    h = list(map(float, x))
    for layer in net_json["layers"]:
        if layer["kind"] == "dense":
            h = [sum(w * v for w, v in zip(row, h)) + b
                 for row, b in zip(layer["weight"], layer["bias"])]
        elif layer["kind"] == "relu":
            h = [max(v, 0.0) for v in h]
    return np.array(h)


def conv_by_loops(x, kernel, bias, stride, padding):
    """Direct convolution on an (H, W, C) image with nested loops."""
    h, w, c = x.shape
    o, _, kh, kw = kernel.shape
    xp = np.zeros((h + 2 * padding, w + 2 * padding, c))
    xp[padding:padding + h, padding:padding + w] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((oh, ow, o))
    for i in range(oh):
        for j in range(ow):
            for k in range(o):
                acc = bias[k]
                for ci in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            acc += kernel[k, ci, a, b] * xp[i * stride + a, j * stride + b, ci]
                out[i, j, k] = acc
    return out


def test_load_two_layer_dense(rng):
    net = load_model(json.dumps(_dense_file(rng)).encode())
    assert len(net.layers) == 5
    assert net.input_dim == 2 and net.output_dim == 2
    assert net.relu_sizes == [4, 2]


def test_relu_on_raw_input_is_accepted():
    net = load_model({"input_shape": [3], "layers": [{"kind": "relu"}]})
    assert np.array_equal(forward(net, [-1.0, 0.5, 2.0]), [0.0, 0.5, 2.0])


def test_wrong_row_count_names_layer(rng):
    data = _dense_file(rng)
    data["layers"][3]["weight"] = rng.normal(size=(3, 4)).tolist()
    with pytest.raises(ModelError, match="layer 3"):
        load_model(data)


def test_column_mismatch_names_layer(rng):
    data = _dense_file(rng)
    data["layers"][3]["weight"] = rng.normal(size=(2, 5)).tolist()
    with pytest.raises(ModelError, match="layer 3"):
        load_model(data)


def test_unsupported_activation_rejected():
    data = {"input_shape": [2], "layers": [{"kind": "sigmoid"}]}
    with pytest.raises(ModelError, match="layer 0"):
        load_model(data)


def test_malformed_file():
    with pytest.raises(ModelError):
        load_model(b"{not json")
    with pytest.raises(ModelError):
        load_model({"layers": []})


def test_identity_forward():
    net = Network([Dense(np.eye(2), np.zeros(2))], [2])
    assert np.array_equal(forward(net, [1.0, -2.0]), [1.0, -2.0])


def test_scalar_relu_forward(scalar_relu_net):
    assert forward(scalar_relu_net, [-3.0])[0] == 0.0


def test_forward_dimension_mismatch(scalar_relu_net):
    with pytest.raises(ValueError):
        forward(scalar_relu_net, [1.0, 2.0])


def test_forward_matches_straight_line_oracle(rng):
    for _ in range(10):
        net = random_dense_net(rng, 4, [6, 5, 3], 2)
        data = net.to_json()
        x = rng.normal(size=4)
        np.testing.assert_allclose(forward(net, x), straight_line(data, x),
                                   rtol=0, atol=1e-12)


def test_forward_is_bit_stable(rng):
    text = json.dumps(random_dense_net(rng, 3, [5], 2).to_json())
    X = rng.normal(size=(50, 3))
    a = load_model(text).evaluate(X)
    b = load_model(text).evaluate(X)
    assert a.tobytes() == b.tobytes()


def test_pre_activations_scalar():
    net = Network([Dense([[2.0]], [0.0]), ReLU()], [1])
    z = pre_activations(net, [[-1.0], [1.0]])
    assert np.array_equal(z[0][:, 0], [-2.0, 2.0])


def test_pre_activations_empty_batch(scalar_relu_net):
    with pytest.raises(ValueError):
        pre_activations(scalar_relu_net, np.zeros((0, 1)))


def test_batch_of_one_matches_forward_internals(rng):
    net = random_dense_net(rng, 3, [4, 4], 2)
    x = rng.normal(size=3)
    z = pre_activations(net, x[None])
    W0, b0 = net.layers[0].weight, net.layers[0].bias
    np.testing.assert_array_equal(z[0][0], W0 @ x + b0)
    out, pre = net.run(x[None])
    np.testing.assert_array_equal(out[0], forward(net, x))
    np.testing.assert_array_equal(pre[1], z[1])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_loop_oracle(rng, stride, padding):
    kernel = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    layer = Conv2d(kernel, bias, stride, padding)
    x = rng.normal(size=(6, 5, 2))
    want = conv_by_loops(x, kernel, bias, stride, padding)
    got = layer.forward(x[None])[0]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
    M, c = layer.matrix(x.shape)
    np.testing.assert_allclose(M @ x.ravel() + c, want.ravel(), rtol=0, atol=1e-12)


def test_conv_net_blocks_match_structured_evaluation(rng):
    net = random_conv_net(rng, hw=6, cin=2)
    X = rng.uniform(size=(20, net.input_dim))
    out, pre = net.run(X)
    h = X
    blocks = net.blocks()
    for q, blk in enumerate(blocks):
        z = h @ np.asarray(blk.weight.T.todense() if hasattr(blk.weight, "todense")
                           else blk.weight.T) + blk.bias
        if q < len(pre):
            np.testing.assert_allclose(z, pre[q], rtol=0, atol=1e-9)
            h = np.maximum(z, 0)
        else:
            np.testing.assert_allclose(z, out, rtol=0, atol=1e-9)


def test_append_dominance_spec(rng):
    net = random_dense_net(rng, 3, [4], 2)
    spec = OutputSpec([[1.0, -1.0]], [0.0])
    net_o = append_output_spec(net, spec)
    X = rng.normal(size=(100, 3))
    y = net.evaluate(X)
    np.testing.assert_allclose(net_o.evaluate(X)[:, 0], y[:, 0] - y[:, 1],
                               atol=1e-12)
    assert len(net.layers) == 3  # original untouched


def test_identity_spec_is_noop(rng):
    net = random_dense_net(rng, 3, [4], 2)
    net_o = append_output_spec(net, OutputSpec(np.eye(2), np.zeros(2)))
    X = rng.normal(size=(100, 3))
    np.testing.assert_allclose(net_o.evaluate(X), net.evaluate(X), atol=1e-12)


def test_spec_membership_by_sampling(rng):
    net = random_dense_net(rng, 3, [6], 3)
    C = rng.normal(size=(3, 3))
    d = rng.normal(size=3)
    net_o = append_output_spec(net, OutputSpec(C, d))
    X = rng.normal(size=(10_000, 3))
    y = net.evaluate(X)
    direct = np.all(y @ C.T + d >= 0, axis=1)
    via = net_o.evaluate(X).min(axis=1) >= 0
    assert np.array_equal(direct, via)


def test_spec_column_mismatch(rng):
    net = random_dense_net(rng, 3, [4], 2)
    with pytest.raises(ValueError):
        append_output_spec(net, OutputSpec([[1.0, 0.0, 0.0]], [0.0]))


def test_class_dominance_rows():
    spec = class_dominance_spec(1, 3)
    np.testing.assert_array_equal(spec.C, [[-1, 1, 0], [0, 1, -1]])
    np.testing.assert_array_equal(spec.d, [0, 0])


def test_json_round_trip(rng):
    net = random_conv_net(rng)
    again = load_model(json.dumps(net.to_json()))
    X = rng.uniform(size=(5, net.input_dim))
    assert net.evaluate(X).tobytes() == again.evaluate(X).tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_spec_equivalence_property(seed):
    rng = np.random.default_rng(seed)
    net = random_dense_net(rng, 2, [5], 2)
    spec = OutputSpec(rng.normal(size=(2, 2)), rng.normal(size=2))
    x = rng.normal(size=(200, 2))
    y = net.evaluate(x)
    inside = np.all(y @ spec.C.T + spec.d >= 0, axis=1)
    assert np.array_equal(inside,
                          append_output_spec(net, spec).evaluate(x).min(axis=1) >= 0)
