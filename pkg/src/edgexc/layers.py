"""Composite layers: separable convolution, residual wrappers and module execution.

A module is compiled into a small tree of nodes (plain layers and
:class:`ResidualWrap` instances).  ``node_forward`` returns the output plus
an opaque cache, ``node_backward`` consumes that cache and fills a gradient
dict keyed like the parameter store.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .arch import CONV_KINDS, LayerSpec, ModuleSpec
from .errors import ArchError, GeometryError, ShapeError, UnsupportedConfigError

BUFFERS = ("running_mean", "running_var")


@dataclass(frozen=True)
class SeparableConvSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    kernel: int = 3
    depth_multiplier: int = 1

    def __post_init__(self):
        if self.depth_multiplier != 1:
            raise UnsupportedConfigError("separable convolutions use a depth multiplier of 1")
        if self.kernel != 3:
            raise UnsupportedConfigError("separable convolutions use 3x3 spatial kernels")

    @property
    def depthwise_shape(self):
        return (self.in_channels, 1, self.kernel, self.kernel)

    @property
    def pointwise_shape(self):
        return (self.out_channels, self.in_channels, 1, 1)

    def num_params(self, bias=False):
        return self.kernel**2 * self.in_channels + self.in_channels * self.out_channels + (self.out_channels if bias else 0)


def separable_conv(x, spec: SeparableConvSpec, dw_weights, pw_weights, bias=None):
    """Depthwise 3x3 (padding 1, spec stride) followed by a stride-1 pointwise 1x1."""
    if x.shape[1] != spec.in_channels:
        raise ShapeError("input channels do not match separable conv", x.shape, spec.depthwise_shape)
    if dw_weights.shape != spec.depthwise_shape or pw_weights.shape != spec.pointwise_shape:
        raise ShapeError("separable conv weights", dw_weights.shape, pw_weights.shape)
    mid = T.depthwise_conv2d(x, dw_weights, T.ConvGeometry.square(spec.kernel, spec.stride, spec.kernel // 2))
    return T.conv2d(mid, pw_weights, bias)


# -- single layers -----------------------------------------------------------


def _geom(layer: LayerSpec):
    return T.ConvGeometry.square(layer.kernel, layer.stride, layer.padding)


def layer_forward(layer: LayerSpec, p, x, mode="train"):
    kind = layer.kind
    if kind == "conv":
        return T.conv2d(x, p["weight"], p.get("bias"), _geom(layer)), x
    if kind == "sepconv":
        mid = T.depthwise_conv2d(x, p["depthwise"], _geom(layer))
        return T.conv2d(mid, p["pointwise"], p.get("bias")), (x, mid)
    if kind == "bn":
        y = T.batchnorm2d(x, p["gamma"], p["beta"], p["running_mean"], p["running_var"], mode)
        return y, (x, mode)
    if kind == "relu":
        return T.relu(x), x
    if kind == "maxpool":
        return T.maxpool2d(x, _geom(layer)), x
    raise ArchError(f"cannot execute layer kind {kind!r}")


def layer_backward(layer: LayerSpec, p, cache, dy):
    """Return ``(dx, grads)`` where ``grads`` maps parameter names to gradients."""
    kind = layer.kind
    if kind == "conv":
        dx, dw, db = T.conv2d_backward(cache, p["weight"], _geom(layer), dy)
        return dx, ({"weight": dw, "bias": db} if "bias" in p else {"weight": dw})
    if kind == "sepconv":
        x, mid = cache
        dmid, dpw, db = T.conv2d_backward(mid, p["pointwise"], None, dy)
        dx, ddw = T.depthwise_conv2d_backward(x, p["depthwise"], _geom(layer), dmid)
        grads = {"depthwise": ddw, "pointwise": dpw}
        if "bias" in p:
            grads["bias"] = db
        return dx, grads
    if kind == "bn":
        x, mode = cache
        dx, dg, db = T.batchnorm2d_backward(
            x, p["gamma"], dy, mode, running_mean=p["running_mean"], running_var=p["running_var"]
        )
        return dx, {"gamma": dg, "beta": db}
    if kind == "relu":
        return T.relu_backward(cache, dy), {}
    if kind == "maxpool":
        return T.maxpool2d_backward(cache, _geom(layer), dy), {}
    raise ArchError(f"cannot differentiate layer kind {kind!r}")


def infer_shape(layer: LayerSpec, shape, path=""):
    """Symbolic (C, H, W) -> (C, H, W) for one layer."""
    c, h, w = shape
    if c != layer.in_ch:
        raise ArchError(f"{layer.kind} expects {layer.in_ch} input channels, got {c}", path)
    if layer.kind in ("bn", "relu"):
        return shape
    try:
        ho, wo = _geom(layer).out_size(h, w)
    except GeometryError as exc:
        raise ArchError(str(exc), path) from exc
    return (layer.out_ch, ho, wo)


def param_shapes(layer: LayerSpec) -> dict[str, tuple[int, ...]]:
    k, i, o = layer.kernel, layer.in_ch, layer.out_ch
    if layer.kind == "conv":
        shapes = {"weight": (o, i, k, k)}
    elif layer.kind == "sepconv":
        shapes = {"depthwise": (i, 1, k, k), "pointwise": (o, i, 1, 1)}
    elif layer.kind == "bn":
        return {"gamma": (o,), "beta": (o,), "running_mean": (o,), "running_var": (o,)}
    else:
        return {}
    if layer.bias:
        shapes["bias"] = (o,)
    return shapes


# -- residual composition ----------------------------------------------------


@dataclass(frozen=True)
class LayerNode:
    id: str
    layer: LayerSpec


@dataclass(frozen=True)
class Projection:
    """1x1 strided convolution followed by batch norm on the skip path."""

    in_channels: int
    out_channels: int
    stride: int
    prefix: str

    @property
    def nodes(self):
        return (
            LayerNode(f"{self.prefix}/conv", LayerSpec("conv", self.in_channels, self.out_channels, self.stride, 1, 0)),
            LayerNode(f"{self.prefix}/bn", LayerSpec("bn", self.out_channels, self.out_channels)),
        )


@dataclass(frozen=True)
class ResidualWrap:
    body: tuple
    skip: "str | Projection" = "identity"

    def check(self, shape, path=""):
        """Shape-check body and skip against an input ``(C, H, W)``; return the output shape."""
        out = nodes_shape(self.body, shape, path)
        if self.skip == "identity":
            if out != tuple(shape):
                raise ArchError(f"identity skip needs matching shapes, body maps {tuple(shape)} -> {out}", path)
        else:
            skip_out = nodes_shape(self.skip.nodes, shape, path + "/skip")
            if skip_out != out:
                raise ArchError(f"projection skip gives {skip_out}, body gives {out}", path)
        return out


def nodes_shape(nodes, shape, path=""):
    shape = tuple(shape)
    for node in nodes:
        if isinstance(node, ResidualWrap):
            shape = node.check(shape, path)
        else:
            shape = infer_shape(node.layer, shape, node.id)
    return shape


def module_plan(path: str, module: ModuleSpec, in_channels: int | None = None):
    """Compile a module into nodes.  Layer ids are ``{path}/l{index}``."""
    nodes = [LayerNode(f"{path}/l{i}", layer) for i, layer in enumerate(module.layers)]
    r = module.residual
    if r.kind == "none":
        return tuple(nodes)
    if r.kind == "single":
        if r.skip == "projection":
            cin = in_channels if in_channels is not None else module.layers[0].in_ch
            cout = next(l.out_ch for l in reversed(module.layers) if l.kind in CONV_KINDS)
            return (ResidualWrap(tuple(nodes), Projection(cin, cout, r.stride, f"{path}/skip")),)
        return (ResidualWrap(tuple(nodes)),)
    module.blocks()  # validates split
    return (ResidualWrap(tuple(nodes[: r.split])), ResidualWrap(tuple(nodes[r.split :])))


def node_forward(node, params, x, mode="train"):
    if isinstance(node, LayerNode):
        return layer_forward(node.layer, params.get(node.id, {}), x, mode)
    h = x
    caches = []
    for child in node.body:
        h, c = node_forward(child, params, h, mode)
        caches.append(c)
    if node.skip == "identity":
        return h + x, (caches, None)
    s, skip_caches = x, []
    for child in node.skip.nodes:
        s, c = node_forward(child, params, s, mode)
        skip_caches.append(c)
    return h + s, (caches, skip_caches)


def node_backward(node, params, cache, dy, grads):
    if isinstance(node, LayerNode):
        dx, g = layer_backward(node.layer, params.get(node.id, {}), cache, dy)
        if g:
            grads[node.id] = g
        return dx
    caches, skip_caches = cache
    dh = dy
    for child, c in zip(reversed(node.body), reversed(caches)):
        dh = node_backward(child, params, c, dh, grads)
    if skip_caches is None:
        return dh + dy
    ds = dy
    for child, c in zip(reversed(node.skip.nodes), reversed(skip_caches)):
        ds = node_backward(child, params, c, ds, grads)
    return dh + ds


def run_nodes(nodes, params, x, mode="train"):
    caches = []
    for node in nodes:
        x, c = node_forward(node, params, x, mode)
        caches.append(c)
    return x, caches


def backprop_nodes(nodes, params, caches, dy, grads):
    for node, c in zip(reversed(nodes), reversed(caches)):
        dy = node_backward(node, params, c, dy, grads)
    return dy


def residual_forward(x, wrap: ResidualWrap, params, mode="eval"):
    """``body(x) + skip(x)`` with no activation after the sum."""
    return node_forward(wrap, params, x, mode)[0]


def module_forward(x, module_spec: ModuleSpec, params, path="module", mode="eval"):
    nodes = module_plan(path, module_spec, x.shape[1])
    nodes_shape(nodes, x.shape[1:], path)
    return run_nodes(nodes, params, x, mode)[0]


def init_layer(layer: LayerSpec, rng: np.random.Generator, dtype=np.float32):
    """He-normal (fan-in) weights, zero biases, unit gamma, zero beta, unit running variance."""
    p = {}
    for name, shape in param_shapes(layer).items():
        if name in ("weight", "pointwise", "depthwise"):
            fan_in = int(np.prod(shape[1:]))
            p[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif name in ("gamma", "running_var"):
            p[name] = np.ones(shape, dtype)
        else:
            p[name] = np.zeros(shape, dtype)
    return p
