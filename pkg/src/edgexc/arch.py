"""Declarative architecture descriptions and their JSON form.

An :class:`ArchSpec` is an ordered list of flows; a flow holds modules and a
repeat count; a module is a flat list of layers plus a residual annotation.
Batch norm and ReLU are explicit layers so structural rules (every
convolution followed by batch norm, no activation on skip paths) can be
checked by scanning the description.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .errors import ArchError

CONV_KINDS = ("conv", "sepconv")
LAYER_KINDS = CONV_KINDS + ("bn", "relu", "maxpool")
RESIDUAL_KINDS = ("none", "single", "double")
SKIP_KINDS = ("identity", "projection")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_ch: int
    out_ch: int
    stride: int = 1
    kernel: int = 3
    padding: int = 1
    bias: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArchError(f"unknown layer kind {self.kind!r}")
        if self.in_ch < 1 or self.out_ch < 1:
            raise ArchError(f"{self.kind} needs positive channel counts, got {self.in_ch}->{self.out_ch}")
        if self.kind not in CONV_KINDS and self.in_ch != self.out_ch:
            raise ArchError(f"{self.kind} cannot change channel count")


@dataclass(frozen=True)
class Residual:
    """Skip annotation of a module.

    ``single`` wraps the whole body with one skip (``identity`` or a 1x1
    ``projection`` of the given stride).  ``double`` splits the body at layer
    index ``split`` into two consecutive sub-blocks, each with its own
    identity skip.
    """

    kind: str = "none"
    skip: str = "identity"
    stride: int = 1
    split: int = 0

    def __post_init__(self):
        if self.kind not in RESIDUAL_KINDS:
            raise ArchError(f"unknown residual kind {self.kind!r}")
        if self.skip not in SKIP_KINDS:
            raise ArchError(f"unknown skip kind {self.skip!r}")

    @property
    def num_skips(self) -> int:
        return {"none": 0, "single": 1, "double": 2}[self.kind]


NO_RESIDUAL = Residual()


@dataclass(frozen=True)
class ModuleSpec:
    layers: tuple[LayerSpec, ...]
    residual: Residual = NO_RESIDUAL

    @property
    def conv_layers(self) -> int:
        return sum(layer.kind in CONV_KINDS for layer in self.layers)

    def blocks(self) -> list[tuple[tuple[LayerSpec, ...], str | None, int]]:
        """Split into ``(layers, skip_kind or None, projection_stride)`` runs."""
        r = self.residual
        if r.kind == "none":
            return [(self.layers, None, 1)]
        if r.kind == "single":
            return [(self.layers, r.skip, r.stride)]
        if not 0 < r.split < len(self.layers):
            raise ArchError(f"double residual split {r.split} outside body of {len(self.layers)} layers")
        return [(self.layers[: r.split], "identity", 1), (self.layers[r.split :], "identity", 1)]


@dataclass(frozen=True)
class FlowSpec:
    name: str
    modules: tuple[ModuleSpec, ...]
    repeat: int = 1


@dataclass(frozen=True)
class ArchSpec:
    name: str
    flows: tuple[FlowSpec, ...]
    num_classes: int
    hidden_fc: tuple[int, ...] = ()
    input_shape: tuple[int, int, int] = field(default=(3, 32, 32))

    def iter_modules(self):
        """Yield ``(path, flow_name, ModuleSpec)`` for every executed module, repeats unrolled."""
        for flow in self.flows:
            for rep in range(flow.repeat):
                for mi, module in enumerate(flow.modules):
                    path = f"{flow.name}/r{rep}/m{mi}" if flow.repeat > 1 else f"{flow.name}/m{mi}"
                    yield path, flow.name, module

    def renamed(self, name):
        return replace(self, name=name)


def _layer_to_dict(layer: LayerSpec) -> dict:
    d = {"kind": layer.kind, "in": layer.in_ch, "out": layer.out_ch, "stride": layer.stride}
    if layer.kind in CONV_KINDS or layer.kind == "maxpool":
        d["kernel"] = layer.kernel
        d["padding"] = layer.padding
    if layer.bias:
        d["bias"] = True
    return d


def _residual_to_dict(r: Residual) -> dict:
    if r.kind == "none":
        return {"kind": "none"}
    if r.kind == "double":
        return {"kind": "double", "split": r.split}
    return {"kind": "single", "skip": r.skip, "stride": r.stride}


def to_dict(spec: ArchSpec) -> dict:
    return {
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "flows": [
            {
                "name": f.name,
                "repeat": f.repeat,
                "modules": [
                    {"layers": [_layer_to_dict(l) for l in m.layers], "residual": _residual_to_dict(m.residual)}
                    for m in f.modules
                ],
            }
            for f in spec.flows
        ],
        "hidden_fc": list(spec.hidden_fc),
        "num_classes": spec.num_classes,
    }


def from_dict(d: dict) -> ArchSpec:
    try:
        flows = []
        for f in d["flows"]:
            modules = []
            for m in f["modules"]:
                layers = tuple(
                    LayerSpec(
                        kind=l["kind"],
                        in_ch=int(l["in"]),
                        out_ch=int(l["out"]),
                        stride=int(l.get("stride", 1)),
                        kernel=int(l.get("kernel", 3)),
                        padding=int(l.get("padding", 1)),
                        bias=bool(l.get("bias", False)),
                    )
                    for l in m["layers"]
                )
                r = m.get("residual", {"kind": "none"})
                if isinstance(r, str):
                    r = {"kind": r}
                residual = Residual(
                    kind=r["kind"],
                    skip=r.get("skip", "identity"),
                    stride=int(r.get("stride", 1)),
                    split=int(r.get("split", 0)),
                )
                modules.append(ModuleSpec(layers, residual))
            flows.append(FlowSpec(f["name"], tuple(modules), int(f.get("repeat", 1))))
        return ArchSpec(
            name=d["name"],
            flows=tuple(flows),
            num_classes=int(d["num_classes"]),
            hidden_fc=tuple(int(h) for h in d.get("hidden_fc", ())),
            input_shape=tuple(int(v) for v in d.get("input_shape", (3, 32, 32))),
        )
    except (KeyError, TypeError) as exc:
        raise ArchError(f"malformed architecture description: {exc!r}") from exc


def emit_json(spec: ArchSpec) -> str:
    return json.dumps(to_dict(spec), indent=1) + "\n"


def parse_json(text: str) -> ArchSpec:
    return from_dict(json.loads(text))
