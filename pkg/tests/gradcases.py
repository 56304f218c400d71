"""Random gradient-check cases: analytic backward vs. float64 central differences.

Each case function returns a list of ``(label, analytic, numeric)`` triples.
Single-precision cases run the kernel in float32 and compare to the float64
finite-difference gradient of the same function.
"""
import numpy as np

from edgexc import tensor as T
from edgexc.arch import LayerSpec
from edgexc.layers import LayerNode, Projection, ResidualWrap, init_layer, node_backward, node_forward
from oracles import numerical_grad


def _proj(out, r):
    """Scalar objective sum(out * r) lets one VJP check the full Jacobian."""
    return float(np.sum(out * r))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def conv2d_case(rng, dtype):
    k = int(rng.integers(1, 4))
    s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w_ = int(rng.integers(k, 5)), int(rng.integers(k, 5))
    x = rng.normal(size=(2, int(rng.integers(1, 4)), h, w_))
    w = rng.normal(size=(int(rng.integers(1, 4)), x.shape[1], k, k))
    b = rng.normal(size=w.shape[0])
    g = T.ConvGeometry.square(k, s, p)
    r = rng.normal(size=T.conv2d(x, w, b, g).shape)
    dx, dw, db = T.conv2d_backward(x.astype(dtype), w.astype(dtype), g, r.astype(dtype))
    return [
        ("dx", dx, numerical_grad(lambda v: _proj(T.conv2d(v, w, b, g), r), x)),
        ("dw", dw, numerical_grad(lambda v: _proj(T.conv2d(x, v, b, g), r), w)),
        ("db", db, numerical_grad(lambda v: _proj(T.conv2d(x, w, v, g), r), b)),
    ]


def depthwise_case(rng, dtype):
    c = int(rng.integers(1, 5))
    s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(2, c, 4, 4))
    w = rng.normal(size=(c, 1, 3, 3))
    g = T.ConvGeometry.square(3, s, p)
    r = rng.normal(size=T.depthwise_conv2d(x, w, g).shape)
    dx, dw = T.depthwise_conv2d_backward(x.astype(dtype), w.astype(dtype), g, r.astype(dtype))
    return [
        ("dx", dx, numerical_grad(lambda v: _proj(T.depthwise_conv2d(v, w, g), r), x)),
        ("dw", dw, numerical_grad(lambda v: _proj(T.depthwise_conv2d(x, v, g), r), w)),
    ]


def batchnorm_case(rng, dtype, mode="train"):
    c = int(rng.integers(1, 5))
    x = rng.normal(1.0, 2.0, size=(3, c, 3, 3))
    gamma, beta = rng.normal(size=c), rng.normal(size=c)
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
    r = rng.normal(size=x.shape)

    def f(xv, gv, bv):
        return _proj(T.batchnorm2d(xv, gv, bv, rm.copy(), rv.copy(), mode), r)

    dx, dg, db = T.batchnorm2d_backward(
        x.astype(dtype), gamma.astype(dtype), r.astype(dtype), mode, rm.astype(dtype), rv.astype(dtype)
    )
    return [
        ("dx", dx, numerical_grad(lambda v: f(v, gamma, beta), x)),
        ("dgamma", dg, numerical_grad(lambda v: f(x, v, beta), gamma)),
        ("dbeta", db, numerical_grad(lambda v: f(x, gamma, v), beta)),
    ]


def batchnorm_eval_case(rng, dtype):
    return batchnorm_case(rng, dtype, mode="eval")


def relu_case(rng, dtype):
    x = _away_from_zero(rng, (2, 3, 4, 4))
    r = rng.normal(size=x.shape)
    dx = T.relu_backward(x.astype(dtype), r.astype(dtype))
    return [("dx", dx, numerical_grad(lambda v: _proj(T.relu(v), r), x))]


def maxpool_case(rng, dtype):
    k = int(rng.integers(2, 4))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, 2)) if k == 3 else 0
    # distinct values so a tiny perturbation never changes the argmax
    x = rng.permutation(np.arange(2 * 2 * 4 * 4, dtype=np.float64)).reshape(2, 2, 4, 4) * 0.1
    g = T.ConvGeometry.square(k, s, p)
    r = rng.normal(size=T.maxpool2d(x, g).shape)
    dx = T.maxpool2d_backward(x.astype(dtype), g, r.astype(dtype))
    return [("dx", dx, numerical_grad(lambda v: _proj(T.maxpool2d(v, g), r), x))]


def gap_case(rng, dtype):
    x = rng.normal(size=(2, 3, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    r = rng.normal(size=(2, 3))
    dx = T.global_avg_pool_backward(x.shape, r.astype(dtype))
    return [("dx", dx, numerical_grad(lambda v: _proj(T.global_avg_pool(v), r), x))]


def linear_case(rng, dtype):
    n, din, dout = 3, int(rng.integers(1, 6)), int(rng.integers(1, 6))
    x, w, b = rng.normal(size=(n, din)), rng.normal(size=(dout, din)), rng.normal(size=dout)
    r = rng.normal(size=(n, dout))
    dx, dw, db = T.linear_backward(x.astype(dtype), w.astype(dtype), r.astype(dtype))
    return [
        ("dx", dx, numerical_grad(lambda v: _proj(T.linear(v, w, b), r), x)),
        ("dw", dw, numerical_grad(lambda v: _proj(T.linear(x, v, b), r), w)),
        ("db", db, numerical_grad(lambda v: _proj(T.linear(x, w, v), r), b)),
    ]


def softmax_ce_case(rng, dtype):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 8))
    z = rng.normal(size=(n, k))
    y = rng.integers(0, k, size=n)
    _, d = T.softmax_cross_entropy(z.astype(dtype), y)
    return [("dlogits", d, numerical_grad(lambda v: T.softmax_cross_entropy(v, y)[0], z))]


def _block(c, rng, dtype, projection):
    """ReLU -> sepconv -> BN -> ReLU -> conv -> BN wrapped in a linear skip."""
    layers = [
        LayerSpec("relu", c, c),
        LayerSpec("sepconv", c, c),
        LayerSpec("bn", c, c),
        LayerSpec("relu", c, c),
        LayerSpec("conv", c, c if not projection else c + 1, stride=1 if not projection else 2),
        LayerSpec("bn", c if not projection else c + 1, c if not projection else c + 1),
    ]
    nodes = tuple(LayerNode(f"b/l{i}", l) for i, l in enumerate(layers))
    skip = Projection(c, c + 1, 2, "b/skip") if projection else "identity"
    wrap = ResidualWrap(nodes, skip)
    params = {}
    for node in nodes + (skip.nodes if projection else ()):
        params[node.id] = init_layer(node.layer, rng, np.float64)
        if node.layer.kind == "bn":
            params[node.id]["gamma"] = rng.normal(size=node.layer.out_ch)
            params[node.id]["beta"] = rng.normal(size=node.layer.out_ch)
    return wrap, params


def residual_block_case(rng, dtype):
    c = int(rng.integers(1, 4))
    projection = bool(rng.integers(0, 2))
    wrap, params = _block(c, rng, dtype, projection)
    x = rng.normal(size=(2, c, 4, 4))

    def fresh(p):
        return {k: {n: a.copy() for n, a in g.items()} for k, g in p.items()}

    y, _ = node_forward(wrap, fresh(params), x, "train")
    r = rng.normal(size=y.shape)
    pc = {k: {n: a.astype(dtype) for n, a in g.items()} for k, g in fresh(params).items()}
    _, cache = node_forward(wrap, pc, x.astype(dtype), "train")
    grads = {}
    dx = node_backward(wrap, pc, cache, r.astype(dtype), grads)
    out = [("dx", dx, numerical_grad(lambda v: _proj(node_forward(wrap, fresh(params), v, "train")[0], r), x))]
    for lid in ("b/l1", "b/l4"):
        name = "depthwise" if lid == "b/l1" else "weight"

        def f(v, lid=lid, name=name):
            p = fresh(params)
            p[lid][name] = v
            return _proj(node_forward(wrap, p, x, "train")[0], r)

        out.append((f"{lid}.{name}", grads[lid][name], numerical_grad(f, params[lid][name])))
    return out


CASES = {
    "conv2d": conv2d_case,
    "depthwise_conv2d": depthwise_case,
    "batchnorm2d[train]": batchnorm_case,
    "batchnorm2d[eval]": batchnorm_eval_case,
    "relu": relu_case,
    "maxpool2d": maxpool_case,
    "global_avg_pool": gap_case,
    "linear": linear_case,
    "softmax_cross_entropy": softmax_ce_case,
    "residual_block": residual_block_case,
}
