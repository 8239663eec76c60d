"""Parameter and FLOP accounting over a NetworkGraph.

Counting convention (tagged on every report):
  - one multiply-accumulate = 2 FLOPs
  - conv: 2 * C_out * (C_in/groups) * K_h * K_w * H_out * W_out FLOPs;
    params include bias when present
  - batch norm: 2 params per channel (scale and shift; running statistics
    excluded), 2 FLOPs per output element
  - activations, resize, pooling, elementwise add: 2 FLOPs per output element
  - concat and pixel shuffle: 0 FLOPs, 0 params
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

from .errors import ContractError

CONVENTION = ("MAC=2FLOPs; conv=2*Cout*(Cin/g)*Kh*Kw*Hout*Wout; "
              "bn/act/resize/pool/add=2 FLOPs per output element; "
              "concat/shuffle=0; params include conv bias and bn scale+shift, "
              "bn running stats excluded")


@dataclass
class LayerRow:
    name: str
    kind: str
    params: int
    flops: int
    out_shape: tuple


@dataclass
class ComplexityReport:
    rows: list = field(default_factory=list)
    convention: str = CONVENTION

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self):
        return sum(r.flops for r in self.rows)

    def to_csv(self):
        buf = io.StringIO()
        buf.write("name,kind,params,flops,out_shape\n")
        for r in self.rows:
            shape = "x".join(str(s) for s in r.out_shape)
            buf.write(f"{r.name},{r.kind},{r.params},{r.flops},{shape}\n")
        buf.write(f"TOTAL,,{self.total_params},{self.total_flops},\n")
        return buf.getvalue()

    def format_table(self):
        lines = [f"{'layer':<40} {'kind':<16} {'params':>12} {'flops':>16}  out"]
        for r in self.rows:
            shape = "x".join(str(s) for s in r.out_shape)
            lines.append(f"{r.name:<40} {r.kind:<16} {r.params:>12} {r.flops:>16}  {shape}")
        lines.append(f"{'TOTAL':<40} {'':<16} {self.total_params:>12} {self.total_flops:>16}")
        lines.append(f"convention: {self.convention}")
        return "\n".join(lines)


def layer_params(layer, in_shapes):
    if layer.kind == "conv":
        p = layer.params
        cin_g = p["in_ch"] // p.get("groups", 1)
        kh, kw = p["kernel"]
        n = p["out_ch"] * cin_g * kh * kw
        if p.get("bias", False):
            n += p["out_ch"]
        return n
    if layer.kind == "bn":
        return 2 * in_shapes[0][1]
    return 0


def layer_flops(layer, in_shapes, out_shape):
    n, c, h, w = out_shape
    if layer.kind == "conv":
        p = layer.params
        cin_g = p["in_ch"] // p.get("groups", 1)
        kh, kw = p["kernel"]
        return 2 * p["out_ch"] * cin_g * kh * kw * h * w * n
    if layer.kind in ("bn", "relu6", "sigmoid", "softmax-spatial", "resize",
                      "avg-pool", "add"):
        return 2 * n * c * h * w
    if layer.kind in ("concat", "pixel-shuffle"):
        return 0
    raise ContractError(f"no flop rule for kind '{layer.kind}'")


def analyze(graph, input_shape=None):
    """Per-layer and total parameter/FLOP counts for a shape-resolved graph."""
    shape = tuple(input_shape or graph.input_shape)
    if not shape:
        raise ContractError("graph has no input shape; pass input_shape")
    shapes = graph.infer_shapes(shape)
    report = ComplexityReport()
    for l in graph.layers:
        ins = [shapes[i] for i in l.inputs]
        out = shapes[l.name]
        report.rows.append(LayerRow(l.name, l.kind, layer_params(l, ins),
                                    layer_flops(l, ins, out), out))
    return report
