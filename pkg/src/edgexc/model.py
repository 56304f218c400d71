"""Parameter store, initialization and whole-network forward/backward."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .arch import ArchSpec
from .errors import ArchError, ShapeError
from .layers import BUFFERS, backprop_nodes, init_layer, param_shapes, run_nodes
from .zoo import compile_spec, iter_layer_nodes


@dataclass
class ModelParams:
    """Layer id -> {name: array}.  Batch-norm running statistics live here too."""

    tensors: dict[str, dict[str, np.ndarray]]
    seed: int | None = None

    def __getitem__(self, layer_id):
        return self.tensors[layer_id]

    def get(self, layer_id, default=None):
        return self.tensors.get(layer_id, default)

    def trainable(self):
        for lid, group in self.tensors.items():
            for name, arr in group.items():
                if name not in BUFFERS:
                    yield lid, name, arr

    def num_trainable(self) -> int:
        return sum(arr.size for _, _, arr in self.trainable())

    def copy(self) -> "ModelParams":
        return ModelParams({k: {n: a.copy() for n, a in g.items()} for k, g in self.tensors.items()}, self.seed)

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every tensor."""
        if self.tensors.keys() != other.tensors.keys():
            return False
        for k, g in self.tensors.items():
            h = other.tensors[k]
            if g.keys() != h.keys():
                return False
            if any(g[n].dtype != h[n].dtype or g[n].tobytes() != h[n].tobytes() for n in g):
                return False
        return True

    def save(self, path):
        flat = {f"{k}::{n}": a for k, g in self.tensors.items() for n, a in g.items()}
        np.savez(path, **flat)

    @classmethod
    def load(cls, path) -> "ModelParams":
        tensors: dict[str, dict[str, np.ndarray]] = {}
        with np.load(path) as data:
            for key in data.files:
                lid, name = key.split("::")
                tensors.setdefault(lid, {})[name] = data[key]
        return cls(tensors)


def _expected_shapes(spec: ArchSpec):
    modules, head = compile_spec(spec)
    for _, _, nodes in modules:
        for node in iter_layer_nodes(nodes):
            shapes = param_shapes(node.layer)
            if shapes:
                yield node.id, node.layer, shapes
    for lin in head:
        yield lin.id, None, {"weight": (lin.out_features, lin.in_features), "bias": (lin.out_features,)}


def init_params(spec: ArchSpec, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-normal fan-in initialization in execution order from one seeded generator."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for lid, layer, shapes in _expected_shapes(spec):
        if layer is not None:
            tensors[lid] = init_layer(layer, rng, dtype)
        else:
            out_f, in_f = shapes["weight"]
            w = rng.standard_normal((out_f, in_f)) * np.sqrt(2.0 / in_f)
            tensors[lid] = {"weight": w.astype(dtype), "bias": np.zeros(out_f, dtype)}
    return ModelParams(tensors, seed)


def check_params(spec: ArchSpec, params: ModelParams):
    """Every layer has exactly its tensors with the right shapes; no orphan entries."""
    expected = {lid: shapes for lid, _, shapes in _expected_shapes(spec)}
    extra = set(params.tensors) - set(expected)
    if extra:
        raise ArchError(f"parameters for unknown layers: {sorted(extra)[:5]}")
    for lid, shapes in expected.items():
        group = params.tensors.get(lid)
        if group is None:
            raise ArchError("missing parameters", lid)
        got = {n: a.shape for n, a in group.items()}
        if got != shapes:
            raise ArchError(f"parameter shapes {got} do not match {shapes}", lid)


@dataclass
class Tape:
    """Everything the backward pass needs from one forward pass."""

    module_caches: list = field(default_factory=list)
    feature_shape: tuple = ()
    head_inputs: list = field(default_factory=list)
    head_pre_relu: list = field(default_factory=list)


def forward(spec: ArchSpec, params: ModelParams, x, mode="eval", tape: Tape | None = None):
    """Logits for a batch ``x[N, C, H, W]``.  Pass a :class:`Tape` to record for :func:`backward`."""
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"{spec.name} expects input [N, {spec.input_shape}]", x.shape)
    modules, head = compile_spec(spec)
    p = params.tensors
    for _, _, nodes in modules:
        x, caches = run_nodes(nodes, p, x, mode)
        if tape is not None:
            tape.module_caches.append(caches)
    if tape is not None:
        tape.feature_shape = x.shape
    h = T.global_avg_pool(x)
    for i, lin in enumerate(head):
        if tape is not None:
            tape.head_inputs.append(h)
        h = T.linear(h, p[lin.id]["weight"], p[lin.id]["bias"])
        if i < len(head) - 1:
            if tape is not None:
                tape.head_pre_relu.append(h)
            h = T.relu(h)
    return h


def backward(spec: ArchSpec, params: ModelParams, tape: Tape, dlogits):
    """Gradients of every trainable tensor, keyed like ``params.tensors``."""
    modules, head = compile_spec(spec)
    p = params.tensors
    grads: dict[str, dict[str, np.ndarray]] = {}
    dh = dlogits
    for i in reversed(range(len(head))):
        lin = head[i]
        if i < len(head) - 1:
            dh = T.relu_backward(tape.head_pre_relu[i], dh)
        dh, dw, db = T.linear_backward(tape.head_inputs[i], p[lin.id]["weight"], dh)
        grads[lin.id] = {"weight": dw.astype(p[lin.id]["weight"].dtype), "bias": db.astype(p[lin.id]["bias"].dtype)}
    dx = T.global_avg_pool_backward(tape.feature_shape, dh)
    for (_, _, nodes), caches in zip(reversed(modules), reversed(tape.module_caches)):
        dx = backprop_nodes(nodes, p, caches, dx, grads)
    return grads


def loss_and_grads(spec: ArchSpec, params: ModelParams, x, labels, mode="train"):
    """Cross-entropy loss, gradients and logits for one batch."""
    tape = Tape()
    logits = forward(spec, params, x, mode, tape)
    loss, dlogits = T.softmax_cross_entropy(logits, labels)
    return loss, backward(spec, params, tape, dlogits), logits
