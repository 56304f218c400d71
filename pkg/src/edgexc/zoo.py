"""Reference architectures, shape validation, parameter counting and memory estimates."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .arch import (
    CONV_KINDS,
    NO_RESIDUAL,
    ArchSpec,
    FlowSpec,
    LayerSpec,
    ModuleSpec,
    Residual,
    emit_json,
    parse_json,
)
from .errors import ArchError
from .layers import LayerNode, Projection, ResidualWrap, infer_shape, module_plan, param_shapes

SPEC_DIR = Path(__file__).parent / "specs"


def _sep(cin, cout):
    return (LayerSpec("sepconv", cin, cout), LayerSpec("bn", cout, cout))


def _relu(c):
    return (LayerSpec("relu", c, c),)


def _pool(c):
    return (LayerSpec("maxpool", c, c, stride=2, kernel=3, padding=1),)


def _stem(c0, c1, padding):
    return ModuleSpec(
        (
            LayerSpec("conv", 3, c0, stride=2, padding=padding),
            LayerSpec("bn", c0, c0),
            *_relu(c0),
            LayerSpec("conv", c0, c1, padding=padding),
            LayerSpec("bn", c1, c1),
            *_relu(c1),
        )
    )


def _down_module(cin, cmid, cout, pre_relu=True):
    """Two separable convs, stride-2 max pool, 1x1 projection skip."""
    layers = (*(_relu(cin) if pre_relu else ()), *_sep(cin, cmid), *_relu(cmid), *_sep(cmid, cout), *_pool(cout))
    return ModuleSpec(layers, Residual("single", "projection", stride=2))


def _chain(widths):
    """ReLU -> sepconv -> BN for each consecutive width pair."""
    layers = ()
    for a, b in zip(widths, widths[1:]):
        layers += (*_relu(a), *_sep(a, b))
    return layers


def _scale(c, s):
    return max(1, int(round(c * s)))


def build_xception_baseline(num_classes: int = 10, width_scale: float = 1.0) -> ArchSpec:
    """Canonical Xception (36 counted conv layers) with a ``num_classes`` head.

    ``width_scale`` shrinks every channel width, for cheap smoke runs only.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    w = lambda c: _scale(c, width_scale)  # noqa: E731
    entry = (
        _stem(w(32), w(64), padding=0),
        _down_module(w(64), w(128), w(128), pre_relu=False),
        _down_module(w(128), w(256), w(256)),
        _down_module(w(256), w(728), w(728)),
    )
    middle = (ModuleSpec(_chain([w(728)] * 4), Residual("single", "identity")),)
    exit_ = (
        _down_module(w(728), w(728), w(1024)),
        ModuleSpec((*_sep(w(1024), w(1536)), *_relu(w(1536)), *_sep(w(1536), w(2048)), *_relu(w(2048)))),
    )
    name = "xception" if width_scale == 1.0 else f"xception@{width_scale:g}"
    spec = ArchSpec(
        name,
        (FlowSpec("entry", entry), FlowSpec("middle", middle, repeat=8), FlowSpec("exit", exit_)),
        num_classes,
    )
    validate_arch(spec)
    return spec


@dataclass(frozen=True)
class WidthConfig:
    """Channel widths of the optimized network.

    ``exit_a`` are the two separable-conv widths of the downsampling exit
    module, ``exit_b`` those of the final residual-free module.
    """

    stem: tuple[int, int] = (32, 64)
    entry: tuple[int, int, int] = (128, 256, 512)
    middle: int = 512
    exit_a: tuple[int, int] = (768, 768)
    exit_b: tuple[int, int] = (768, 1280)
    hidden_fc: tuple[int, ...] = ()

    def ordered(self):
        return (*self.stem, *self.entry, self.middle, *self.exit_a, *self.exit_b)

    def scaled(self, s: float) -> "WidthConfig":
        f = lambda t: tuple(_scale(c, s) for c in t)  # noqa: E731
        return WidthConfig(f(self.stem), f(self.entry), _scale(self.middle, s), f(self.exit_a), f(self.exit_b), f(self.hidden_fc))


REFERENCE_WIDTHS = WidthConfig()


def build_optimized(num_classes: int = 10, width_config: WidthConfig | None = None, name: str | None = None) -> ArchSpec:
    """The 12-module, 26-conv-layer optimized network.

    entry: stem (2 convs) + 3 downsampling modules with projection skips;
    middle_1: one module of 2 separable convs repeated 4 times, two identity
    sub-blocks each; middle_2: two 3-sepconv modules, the second split into
    two sub-blocks; exit: one downsampling module, one residual-free module;
    then global average pooling and a fully connected classifier.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    wc = width_config or REFERENCE_WIDTHS
    widths = wc.ordered()
    if min(widths) < 1 or any(h < 1 for h in wc.hidden_fc):
        raise ValueError(f"widths must be positive: {wc}")
    if any(b < a for a, b in zip(widths, widths[1:])):
        raise ValueError(f"widths must be non-decreasing across stages: {widths}")
    (s0, s1), (e1, e2, e3), m = wc.stem, wc.entry, wc.middle
    entry = (
        _stem(s0, s1, padding=1),
        _down_module(s1, e1, e1, pre_relu=False),
        _down_module(e1, e2, e2),
        _down_module(e2, e3, e3),
    )
    middle_1 = (ModuleSpec(_chain([m, m, m]), Residual("double", split=3)),)
    middle_2 = (
        ModuleSpec(_chain([m] * 4), Residual("single", "identity")),
        ModuleSpec(_chain([m] * 4), Residual("double", split=6)),
    )
    (xa1, xa2), (xb1, xb2) = wc.exit_a, wc.exit_b
    exit_ = (
        _down_module(m, xa1, xa2),
        ModuleSpec((*_sep(xa2, xb1), *_relu(xb1), *_sep(xb1, xb2), *_relu(xb2)), NO_RESIDUAL),
    )
    spec = ArchSpec(
        name or ("optimized" if wc == REFERENCE_WIDTHS else "optimized-custom"),
        (
            FlowSpec("entry", entry),
            FlowSpec("middle_1", middle_1, repeat=4),
            FlowSpec("middle_2", middle_2),
            FlowSpec("exit", exit_),
        ),
        num_classes,
        hidden_fc=tuple(wc.hidden_fc),
    )
    validate_arch(spec)
    return spec


def build(name: str, num_classes: int = 10, width_scale: float = 1.0) -> ArchSpec:
    """Look up a named reference architecture."""
    if name == "xception":
        return build_xception_baseline(num_classes, width_scale)
    if name == "optimized":
        if width_scale == 1.0:
            return build_optimized(num_classes)
        return build_optimized(num_classes, REFERENCE_WIDTHS.scaled(width_scale), name=f"optimized@{width_scale:g}")
    raise KeyError(f"unknown model {name!r}; expected 'xception' or 'optimized'")


def load_reference_spec(name: str) -> ArchSpec:
    return parse_json((SPEC_DIR / f"{name}.json").read_text())


# -- compiled view -----------------------------------------------------------


@dataclass(frozen=True)
class Linear:
    id: str
    in_features: int
    out_features: int


@lru_cache(maxsize=32)
def compile_spec(spec: ArchSpec):
    """Return ``(modules, head)``: ``[(path, flow, nodes)]`` and the classifier ``Linear`` list."""
    modules = []
    c = spec.input_shape[0]
    for path, flow, module in spec.iter_modules():
        modules.append((path, flow, module_plan(path, module, c)))
        convs = [l for l in module.layers if l.kind in CONV_KINDS]
        if convs:
            c = convs[-1].out_ch
    head = []
    for i, h in enumerate(spec.hidden_fc + (spec.num_classes,)):
        head.append(Linear(f"head/fc{i}", c, h))
        c = h
    return tuple(modules), tuple(head)


def iter_layer_nodes(nodes):
    for node in nodes:
        if isinstance(node, LayerNode):
            yield node
        else:
            yield from iter_layer_nodes(node.body)
            if isinstance(node.skip, Projection):
                yield from node.skip.nodes


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class TraceEntry:
    path: str
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    flow: str = ""
    extra_elems: int = 0  # intermediate kept for backward (sepconv depthwise output)


class ShapeTrace(list):
    """Per-layer symbolic shapes, in execution order."""

    @property
    def output_shape(self):
        return self[-1].out_shape

    def format(self) -> str:
        rows = [f"{'layer':32s} {'kind':8s} {'input':>20s} -> output"]
        for e in self:
            rows.append(f"{e.path:32s} {e.kind:8s} {str(e.in_shape):>20s} -> {e.out_shape}")
        return "\n".join(rows)


def _trace_nodes(nodes, shape, trace, flow, batch):
    for node in nodes:
        if isinstance(node, LayerNode):
            out = infer_shape(node.layer, shape, node.id)
            extra = batch * node.layer.in_ch * out[1] * out[2] if node.layer.kind == "sepconv" else 0
            trace.append(TraceEntry(node.id, node.layer.kind, (batch, *shape), (batch, *out), flow, extra))
            shape = out
            continue
        out = _trace_nodes(node.body, shape, trace, flow, batch)
        if isinstance(node.skip, Projection):
            skip_out = _trace_nodes(node.skip.nodes, shape, trace, flow, batch)
            if skip_out != out:
                raise ArchError(f"projection skip gives {skip_out}, body gives {out}", node.skip.prefix)
        elif out != shape:
            first = node.body[0].id if node.body and isinstance(node.body[0], LayerNode) else "?"
            raise ArchError(
                f"identity skip across a shape change {shape} -> {out}", first.rsplit("/", 1)[0]
            )
        trace.append(TraceEntry(f"{node.body[0].id.rsplit('/', 1)[0]}/add" if node.body else "add", "add", (batch, *out), (batch, *out), flow))
        shape = out
    return shape


def validate_arch(spec: ArchSpec, batch: int = 1) -> ShapeTrace:
    """Symbolically run ``spec`` on ``[batch, *input_shape]``; raise ArchError at the first inconsistency."""
    modules, head = compile_spec(spec)
    trace = ShapeTrace()
    shape = tuple(spec.input_shape)
    for path, flow, nodes in modules:
        shape = _trace_nodes(nodes, shape, trace, flow, batch)
    trace.append(TraceEntry("head/gap", "gap", (batch, *shape), (batch, shape[0]), "head"))
    width = shape[0]
    for lin in head:
        if lin.in_features != width:
            raise ArchError(f"expects {lin.in_features} features, got {width}", lin.id)
        trace.append(TraceEntry(lin.id, "linear", (batch, width), (batch, lin.out_features), "head"))
        width = lin.out_features
    return trace


def count_conv_layers(spec: ArchSpec) -> int:
    """Stem convs plus separable convs; 1x1 projection skips are not counted."""
    return sum(m.conv_layers for _, _, m in spec.iter_modules())


def count_modules(spec: ArchSpec) -> int:
    return sum(1 for _ in spec.iter_modules())


def structural_violations(spec: ArchSpec) -> list[str]:
    """Paths of convolutions not immediately followed by batch norm, or depthwise multipliers != 1."""
    bad = []
    for path, _, module in spec.iter_modules():
        layers = module.layers
        for i, layer in enumerate(layers):
            if layer.kind in CONV_KINDS and (i + 1 >= len(layers) or layers[i + 1].kind != "bn"):
                bad.append(f"{path}/l{i}")
    return bad


def _layer_param_count(layer: LayerSpec) -> int:
    return sum(int(np.prod(s)) for n, s in param_shapes(layer).items() if n not in ("running_mean", "running_var"))


def count_trainable_params(spec: ArchSpec, by_flow: bool = False):
    """Conv/separable/linear weights, enabled biases and batch-norm gamma+beta."""
    modules, head = compile_spec(spec)
    counts: dict[str, int] = {}
    for _, flow, nodes in modules:
        counts[flow] = counts.get(flow, 0) + sum(_layer_param_count(n.layer) for n in iter_layer_nodes(nodes))
    counts["head"] = sum(l.in_features * l.out_features + l.out_features for l in head)
    return counts if by_flow else sum(counts.values())


def count_buffer_elems(spec: ArchSpec) -> int:
    modules, _ = compile_spec(spec)
    return sum(2 * n.layer.out_ch for _, _, nodes in modules for n in iter_layer_nodes(nodes) if n.layer.kind == "bn")


# -- memory ------------------------------------------------------------------

PRECISION_BYTES = {"single": 4, "double": 8, "float32": 4, "float64": 8}


@dataclass(frozen=True)
class MemoryBreakdown:
    weight_bytes: int
    gradient_bytes: int
    optimizer_bytes: int
    activation_bytes: int
    buffer_bytes: int
    activation_by_flow: dict = field(default_factory=dict, compare=False)

    @property
    def total_bytes(self) -> int:
        return self.weight_bytes + self.gradient_bytes + self.optimizer_bytes + self.activation_bytes


def estimate_memory(spec: ArchSpec, batch_size: int, precision: str = "single", training: bool = True) -> MemoryBreakdown:
    """Analytic footprint from parameter counts and the shape trace.

    Training keeps every layer output (and each separable conv's depthwise
    intermediate) alive for the backward pass, so activations are summed.
    Inference only needs the largest input+output pair at any one time,
    plus the module input held for a pending skip connection.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    bpe = PRECISION_BYTES[precision]
    params = count_trainable_params(spec)
    trace = validate_arch(spec, batch_size)
    n_in = int(np.prod(trace[0].in_shape))
    by_flow: dict[str, int] = {}
    if training:
        for e in trace:
            by_flow[e.flow] = by_flow.get(e.flow, 0) + (int(np.prod(e.out_shape)) + e.extra_elems) * bpe
        activation = n_in * bpe + sum(by_flow.values())
    else:
        peak, peak_flow = 0, ""
        for e in trace:
            live = int(np.prod(e.in_shape)) * 2 + int(np.prod(e.out_shape)) + e.extra_elems
            if live > peak:
                peak, peak_flow = live, e.flow
        activation = peak * bpe
        by_flow[peak_flow] = activation
    return MemoryBreakdown(
        weight_bytes=params * bpe,
        gradient_bytes=params * bpe if training else 0,
        optimizer_bytes=2 * params * bpe if training else 0,
        activation_bytes=activation,
        buffer_bytes=count_buffer_elems(spec) * bpe,
        activation_by_flow=by_flow,
    )


@dataclass(frozen=True)
class ModelSummary:
    name: str
    trainable_param_count: int
    conv_layer_count: int
    module_count: int
    params_by_flow: dict
    memory: MemoryBreakdown
    batch_size: int

    def format(self) -> str:
        m = self.memory
        lines = [
            f"model: {self.name}",
            f"trainable parameters: {self.trainable_param_count:,} ({self.trainable_param_count / 1e6:.2f}M)",
            f"conv layers: {self.conv_layer_count}",
            f"modules: {self.module_count}",
        ]
        lines += [f"  {flow}: {n:,}" for flow, n in self.params_by_flow.items()]
        lines.append(
            f"memory estimate (training, batch {self.batch_size}, float32): {m.total_bytes / 2**20:.1f} MiB "
            f"[weights {m.weight_bytes / 2**20:.1f}, grads {m.gradient_bytes / 2**20:.1f}, "
            f"adam {m.optimizer_bytes / 2**20:.1f}, activations {m.activation_bytes / 2**20:.1f}]"
        )
        return "\n".join(lines)


def summarize(spec: ArchSpec, batch_size: int = 64) -> ModelSummary:
    return ModelSummary(
        spec.name,
        count_trainable_params(spec),
        count_conv_layers(spec),
        count_modules(spec),
        count_trainable_params(spec, by_flow=True),
        estimate_memory(spec, batch_size, "single", training=True),
        batch_size,
    )


def write_reference_specs(directory: Path = SPEC_DIR):
    directory.mkdir(parents=True, exist_ok=True)
    for spec in (build_xception_baseline(10), build_optimized(10)):
        (directory / f"{spec.name}.json").write_text(emit_json(spec))
