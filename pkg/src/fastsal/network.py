"""Declarative network graphs: the MobileNetV2 feature backbone with 18 taps,
the 4-block feature grouping, and the two FastSal decoders (concatenation and
addition variants), plus batch-norm folding and weight serialization.

A NetworkGraph is an ordered list of LayerSpec records executed top to bottom;
every layer names its inputs, so shape inference and complexity accounting can
run without weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, ParseError, ShapeError, WeightStoreError
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# MobileNetV2 inverted-residual schedule: (expansion, channels, repeats, stride)
_MOBILENETV2_CFG = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]

# per-block 1x1 adaptation widths at width 1.0, chosen to divide the 1408
# concatenated channels along the teacher's feature widths at matching scales
CONCAT_ADAPT = (256, 512, 512, 128)
ADD_ADAPT = (64, 128, 256, 512)


def _make_divisible(v, divisor=8):
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


@dataclass
class LayerSpec:
    """One graph node. kind is one of: conv, bn, relu6, sigmoid,
    softmax-spatial, resize, pixel-shuffle, avg-pool, concat, add."""
    name: str
    kind: str
    inputs: list
    params: dict = field(default_factory=dict)
    tap: bool = False

    def weight_slots(self):
        if self.kind == "conv":
            slots = [self.name + ".w"]
            if self.params.get("bias", False):
                slots.append(self.name + ".b")
            return slots
        if self.kind == "bn":
            return [self.name + s for s in (".gamma", ".beta", ".rmean", ".rvar")]
        return []


@dataclass
class NetworkGraph:
    layers: list
    taps: list = field(default_factory=list)
    variant: str = ""
    input_shape: tuple = ()

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def weight_slots(self):
        slots = []
        for l in self.layers:
            slots.extend(l.weight_slots())
        return slots

    def output_name(self):
        return self.layers[-1].name

    def infer_shapes(self, input_shape=None):
        """Shape of every layer output as a pure function of the input shape."""
        shapes = {"input": tuple(input_shape or self.input_shape)}
        for l in self.layers:
            ins = [shapes[i] for i in l.inputs]
            shapes[l.name] = _out_shape(l, ins)
        return shapes

    def run(self, store, x, training=False, want=None):
        """Execute the graph. Returns a dict with the final output under "out"
        plus any layer names requested in `want` (use "taps" to collect all
        tapped layers)."""
        want = set(want or ())
        collect_taps = "taps" in want
        acts = {"input": x}
        results = {}
        tap_values = []
        for l in self.layers:
            ins = [acts[i] for i in l.inputs]
            try:
                y = _execute(l, ins, store, training)
            except (ShapeError, ConfigError) as e:
                raise type(e)(f"layer '{l.name}': {e}") from e
            acts[l.name] = y
            if l.tap and collect_taps:
                tap_values.append(y)
            if l.name in want:
                results[l.name] = y
        results["out"] = acts[self.layers[-1].name]
        if collect_taps:
            results["taps"] = tap_values
        return results


def _out_shape(l, ins):
    kind = l.kind
    n, c, h, w = ins[0]
    if kind == "conv":
        kh, kw = l.params["kernel"]
        sh, sw = l.params["stride"]
        ph, pw = l.params["padding"]
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        return (n, l.params["out_ch"], ho, wo)
    if kind in ("bn", "relu6", "sigmoid", "softmax-spatial"):
        return ins[0]
    if kind == "resize":
        return (n, c, l.params["out_h"], l.params["out_w"])
    if kind == "pixel-shuffle":
        r = l.params["r"]
        return (n, c // (r * r), h * r, w * r)
    if kind == "avg-pool":
        k = l.params["k"]
        return (n, c, h // k, w // k)
    if kind == "concat":
        return (n, sum(s[1] for s in ins), h, w)
    if kind == "add":
        return ins[0]
    raise ConfigError(f"unknown layer kind '{kind}'")


def _execute(l, ins, store, training):
    kind = l.kind
    if kind == "conv":
        w = store.get(l.name + ".w")
        b = store.get(l.name + ".b") if l.params.get("bias", False) else None
        return kernels.conv2d(ins[0], w, b, stride=l.params["stride"],
                              padding=l.params["padding"],
                              groups=l.params.get("groups", 1))
    if kind == "bn":
        return kernels.batch_norm(
            ins[0], store.get(l.name + ".gamma"), store.get(l.name + ".beta"),
            store.get(l.name + ".rmean"), store.get(l.name + ".rvar"),
            eps=l.params.get("eps", BN_EPS),
            momentum=l.params.get("momentum", BN_MOMENTUM), training=training)
    if kind == "relu6":
        from .tensor import relu6
        return relu6(ins[0])
    if kind == "sigmoid":
        from .tensor import sigmoid
        return sigmoid(ins[0])
    if kind == "softmax-spatial":
        return kernels.softmax_spatial(ins[0])
    if kind == "resize":
        return kernels.bilinear_resize(ins[0], l.params["out_h"], l.params["out_w"])
    if kind == "pixel-shuffle":
        return kernels.pixel_shuffle(ins[0], l.params["r"])
    if kind == "avg-pool":
        return kernels.avg_pool2d(ins[0], l.params["k"])
    if kind == "concat":
        return kernels.concat_channels(ins)
    if kind == "add":
        out = ins[0]
        for t in ins[1:]:
            out = out + t
        return out
    raise ConfigError(f"unknown layer kind '{kind}'")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self):
        self.layers = []

    def emit(self, name, kind, inputs, tap=False, **params):
        self.layers.append(LayerSpec(name, kind, list(inputs), params, tap))
        return name

    def conv(self, name, inp, in_ch, out_ch, kernel=1, stride=1, padding=0,
             groups=1, bias=False, tap=False):
        k = (kernel, kernel) if isinstance(kernel, int) else kernel
        s = (stride, stride) if isinstance(stride, int) else stride
        p = (padding, padding) if isinstance(padding, int) else padding
        return self.emit(name, "conv", [inp], tap=tap, in_ch=in_ch, out_ch=out_ch,
                         kernel=k, stride=s, padding=p, groups=groups, bias=bias)

    def conv_bn_relu(self, prefix, inp, in_ch, out_ch, kernel, stride, groups=1):
        pad = (kernel - 1) // 2
        c = self.conv(prefix + ".conv", inp, in_ch, out_ch, kernel, stride, pad, groups)
        b = self.emit(prefix + ".bn", "bn", [c])
        return self.emit(prefix + ".relu", "relu6", [b])


def _inverted_residual(b, prefix, inp, in_ch, out_ch, stride, expand):
    hidden = in_ch * expand
    x = inp
    if expand != 1:
        x = b.conv_bn_relu(prefix + ".expand", x, in_ch, hidden, 1, 1)
    x = b.conv_bn_relu(prefix + ".dw", x, hidden, hidden, 3, stride, groups=hidden)
    x = b.conv(prefix + ".project.conv", x, hidden, out_ch, 1, 1, 0)
    x = b.emit(prefix + ".project.bn", "bn", [x])
    if stride == 1 and in_ch == out_ch:
        x = b.emit(prefix + ".add", "add", [x, inp])
    return x


def _backbone_layers(b, width=1.0):
    """Stem plus 17 inverted residual blocks; marks the 18 taps. Returns
    (tap names, tap channels)."""
    taps = []
    tap_ch = []
    c_in = _make_divisible(32 * width)
    x = b.conv_bn_relu("backbone.stem", "input", 3, c_in, 3, 2)
    b.layers[-1].tap = True
    taps.append(x)
    tap_ch.append(c_in)
    idx = 0
    for t, c, n, s in _MOBILENETV2_CFG:
        c_out = _make_divisible(c * width)
        for i in range(n):
            idx += 1
            x = _inverted_residual(b, f"backbone.b{idx}", x, c_in,
                                   c_out, s if i == 0 else 1, t)
            b.layers[-1].tap = True
            taps.append(x)
            tap_ch.append(c_out)
            c_in = c_out
    return taps, tap_ch


def build_backbone(input_shape, width=1.0):
    """MobileNetV2 feature extractor with a tap after the stem and after each
    of the 17 inverted residual blocks."""
    n, c, h, w = input_shape
    if h % 16 or w % 16:
        raise ConfigError(f"input H and W must be divisible by 16, got {h}x{w}")
    b = _Builder()
    taps, _ = _backbone_layers(b, width)
    return NetworkGraph(b.layers, taps=taps, variant="backbone",
                        input_shape=tuple(input_shape))


# tap index ranges per spatial scale: H/2 (stem + block1), H/4, H/8, H/16, H/32
_SCALE_GROUPS = [(0, 2), (2, 4), (4, 7), (7, 14), (14, 18)]


def _grouping_layers(b, taps, tap_ch):
    """Merge 18 taps into 4 feature blocks. The two half-resolution taps are
    average-pooled down one scale and folded into the first block."""
    p0 = b.emit("blocks.pool0", "avg-pool", [taps[0]], k=2)
    p1 = b.emit("blocks.pool1", "avg-pool", [taps[1]], k=2)
    b1 = b.emit("blocks.b1", "concat", [p0, p1, taps[2], taps[3]])
    b2 = b.emit("blocks.b2", "concat", taps[4:7])
    b3 = b.emit("blocks.b3", "concat", taps[7:14])
    b4 = b.emit("blocks.b4", "concat", taps[14:18])
    ch = [tap_ch[0] + tap_ch[1] + tap_ch[2] + tap_ch[3],
          sum(tap_ch[4:7]), sum(tap_ch[7:14]), sum(tap_ch[14:18])]
    return [b1, b2, b3, b4], ch


@dataclass
class FeatureBlocks:
    """The four grouped multi-scale feature maps, finest (H/4) to coarsest (H/32)."""
    b1: Tensor
    b2: Tensor
    b3: Tensor
    b4: Tensor

    def as_list(self):
        return [self.b1, self.b2, self.b3, self.b4]


def group_feature_blocks(taps):
    """Group the 18 backbone taps into 4 blocks by spatial scale."""
    if len(taps) != 18:
        raise ContractError(f"expected 18 backbone taps, got {len(taps)}")
    p0 = kernels.avg_pool2d(taps[0], 2)
    p1 = kernels.avg_pool2d(taps[1], 2)
    b1 = kernels.concat_channels([p0, p1, taps[2], taps[3]])
    b2 = kernels.concat_channels(taps[4:7])
    b3 = kernels.concat_channels(taps[7:14])
    b4 = kernels.concat_channels(taps[14:18])
    return FeatureBlocks(b1, b2, b3, b4)


def _decoder_concat_layers(b, blocks, block_ch, h, w, width):
    adapt_ch = [_make_divisible(a * width) for a in CONCAT_ADAPT]
    ups = []
    for i, (blk, cin, cout) in enumerate(zip(blocks, block_ch, adapt_ch), 1):
        a = b.conv(f"decoder.adapt{i}", blk, cin, cout, bias=True)
        ups.append(b.emit(f"decoder.up{i}", "resize", [a], out_h=h // 2, out_w=w // 2))
    cat = b.emit("decoder.concat", "concat", ups)
    shuf = b.emit("decoder.shuffle", "pixel-shuffle", [cat], r=2)
    b.conv("decoder.out", shuf, sum(adapt_ch) // 4, 1, bias=True)


def _mir_layers(b, prefix, inp, din, dout):
    """Inverted residual with expansion 2; residual skip only when the channel
    count is preserved."""
    hidden = 2 * din
    x = b.conv(prefix + ".expand.conv", inp, din, hidden, 1, bias=True)
    x = b.emit(prefix + ".expand.bn", "bn", [x])
    x = b.emit(prefix + ".expand.relu", "relu6", [x])
    x = b.conv(prefix + ".dw.conv", x, hidden, hidden, 3, 1, 1, groups=hidden, bias=True)
    x = b.emit(prefix + ".dw.bn", "bn", [x])
    x = b.emit(prefix + ".dw.relu", "relu6", [x])
    x = b.conv(prefix + ".project.conv", x, hidden, dout, 1, bias=True)
    x = b.emit(prefix + ".project.bn", "bn", [x])
    if din == dout:
        x = b.emit(prefix + ".add", "add", [x, inp])
    return x


def _decoder_add_layers(b, blocks, block_ch, h, w, width):
    adapt_ch = [_make_divisible(a * width) for a in ADD_ADAPT]
    if adapt_ch[0] % 16:
        adapt_ch[0] = _make_divisible(adapt_ch[0], 16)
    adapted = [b.conv(f"decoder.adapt{i}", blk, cin, cout, bias=True)
               for i, (blk, cin, cout) in enumerate(zip(blocks, block_ch, adapt_ch), 1)]
    scales = [(h // 4, w // 4), (h // 8, w // 8), (h // 16, w // 16), (h // 32, w // 32)]
    # top-down: coarsest block first, each level fused with the resized
    # previous output before its inverted residual
    prev = _mir_layers(b, "decoder.mir4", adapted[3], adapt_ch[3], adapt_ch[2])
    for i in (3, 2, 1):
        up = b.emit(f"decoder.td_up{i}", "resize", [prev],
                    out_h=scales[i - 1][0], out_w=scales[i - 1][1])
        s = b.emit(f"decoder.td_add{i}", "add", [adapted[i - 1], up])
        dout = adapt_ch[i - 2] if i >= 2 else adapt_ch[0]
        prev = _mir_layers(b, f"decoder.mir{i}", s, adapt_ch[i - 1], dout)
    x = b.emit("decoder.shuffle1", "pixel-shuffle", [prev], r=2)
    c = adapt_ch[0] // 4
    x = b.conv("decoder.post", x, c, c, bias=True)
    x = b.emit("decoder.shuffle2", "pixel-shuffle", [x], r=2)
    b.conv("decoder.out", x, c // 4, 1, bias=True)


def build_fastsal(variant, input_shape, width=1.0):
    """Full FastSal graph: backbone taps, block grouping, and the chosen
    decoder. Output is a single channel of unnormalized logits at input size."""
    if variant not in ("C", "A"):
        raise ConfigError(f"variant must be 'C' or 'A', got '{variant}'")
    n, c, h, w = input_shape
    if h % 16 or w % 16:
        raise ConfigError(f"input H and W must be divisible by 16, got {h}x{w}")
    b = _Builder()
    taps, tap_ch = _backbone_layers(b, width)
    blocks, block_ch = _grouping_layers(b, taps, tap_ch)
    if variant == "C":
        _decoder_concat_layers(b, blocks, block_ch, h, w, width)
    else:
        _decoder_add_layers(b, blocks, block_ch, h, w, width)
    return NetworkGraph(b.layers, taps=taps, variant=variant,
                        input_shape=tuple(input_shape))


def modified_inverted_residual(x, prev_resized, weights, prefix="mir"):
    """Fuse a level's adapted features with the resized previous-level output,
    then apply an expansion-2 inverted residual. Weight slots follow the graph
    naming: {prefix}.expand/dw/project."""
    if prev_resized is not None:
        if prev_resized.shape != x.shape:
            raise ShapeError(
                f"level features {x.shape} and resized previous {prev_resized.shape} differ")
        x = x + prev_resized
    din = x.shape[1]
    dout = weights.get(prefix + ".project.conv.w").shape[0]
    b = _Builder()
    _mir_layers(b, prefix, "input", din, dout)
    g = NetworkGraph(b.layers, input_shape=x.shape)
    return g.run(weights, x)["out"]


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

class WeightStore:
    """Named tensor slots backing a graph."""

    def __init__(self, tensors=None):
        self.tensors = dict(tensors or {})

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def get(self, name):
        try:
            return self.tensors[name]
        except KeyError:
            raise WeightStoreError(f"missing weight slot '{name}'") from None

    def put(self, name, tensor):
        self.tensors[name] = tensor

    def names(self):
        return list(self.tensors)

    def copy(self):
        return WeightStore({k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                            for k, v in self.tensors.items()})

    def scalar_count(self, exclude_running_stats=True):
        total = 0
        for k, v in self.tensors.items():
            if exclude_running_stats and k.endswith((".rmean", ".rvar")):
                continue
            total += v.size
        return total


def trainable_slots(store):
    """Slots updated by the optimizer: everything except BN running stats."""
    return [k for k in store.names() if not k.endswith((".rmean", ".rvar"))]


def init_weights(graph, seed=0, dtype=np.float32):
    """Fan-in scaled uniform init for convs; identity init for batch norm."""
    rng = np.random.default_rng(seed)
    store = WeightStore()
    shapes = graph.infer_shapes()
    for l in graph.layers:
        if l.kind == "conv":
            cin_g = l.params["in_ch"] // l.params.get("groups", 1)
            kh, kw = l.params["kernel"]
            fan_in = cin_g * kh * kw
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound,
                            size=(l.params["out_ch"], cin_g, kh, kw)).astype(dtype)
            store.put(l.name + ".w", Tensor(w))
            if l.params.get("bias", False):
                store.put(l.name + ".b", Tensor(np.zeros(l.params["out_ch"], dtype=dtype)))
        elif l.kind == "bn":
            c = shapes[l.inputs[0]][1]
            store.put(l.name + ".gamma", Tensor(np.ones(c, dtype=dtype)))
            store.put(l.name + ".beta", Tensor(np.zeros(c, dtype=dtype)))
            store.put(l.name + ".rmean", Tensor(np.zeros(c, dtype=dtype)))
            store.put(l.name + ".rvar", Tensor(np.ones(c, dtype=dtype)))
    return store


_MAGIC = b"FSAL"
_VERSION = 1


def save_weights(store, path):
    """Little-endian container: magic, u16 version, u32 entry count; each entry
    u16 name length, UTF-8 name, u8 rank, u32 dims, raw float32 payload."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<H", _VERSION))
        f.write(struct.pack("<I", len(store.tensors)))
        for name in store.names():
            t = store.tensors[name]
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            shape = t.shape if t.shape else (1,)
            f.write(struct.pack("<B", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_weights(path):
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise ParseError(f"truncated weight file while reading {what}", offset=off)
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != _MAGIC:
        raise ParseError("bad magic, not a weight file", offset=0)
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != _VERSION:
        raise ParseError(f"unsupported weight file version {version}", offset=4)
    (count,) = struct.unpack("<I", take(4, "entry count"))
    store = WeightStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        nelem = int(np.prod(dims)) if rank else 1
        payload = take(4 * nelem, f"payload of '{name}'")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        store.put(name, Tensor(arr))
    if off != len(blob):
        raise ParseError("trailing bytes after last entry", offset=off)
    return store


def check_weights(graph, store):
    """Verify every graph slot resolves with the declared shape."""
    shapes = graph.infer_shapes()
    for l in graph.layers:
        for slot in l.weight_slots():
            t = store.get(slot)
            if l.kind == "conv" and slot.endswith(".w"):
                cin_g = l.params["in_ch"] // l.params.get("groups", 1)
                expect = (l.params["out_ch"], cin_g, *l.params["kernel"])
                if t.shape != expect:
                    raise WeightStoreError(
                        f"slot '{slot}' has shape {t.shape}, expected {expect}")
            elif l.kind == "conv" and slot.endswith(".b"):
                if t.shape != (l.params["out_ch"],):
                    raise WeightStoreError(
                        f"slot '{slot}' has shape {t.shape}, "
                        f"expected ({l.params['out_ch']},)")
            elif l.kind == "bn":
                c = shapes[l.inputs[0]][1]
                if t.shape != (c,):
                    raise WeightStoreError(
                        f"slot '{slot}' has shape {t.shape}, expected ({c},)")


# ---------------------------------------------------------------------------
# batch-norm folding
# ---------------------------------------------------------------------------

def fold_batch_norm(graph, store):
    """Fuse conv+bn pairs for inference. Returns a new (graph, store); the
    originals are untouched. BN layers without a directly preceding conv are
    left unfused."""
    import warnings

    consumers = {}
    for l in graph.layers:
        for i in l.inputs:
            consumers.setdefault(i, []).append(l.name)

    by_name = {l.name: l for l in graph.layers}
    folded = {}   # bn name -> conv name
    new_layers = []
    new_store = store.copy()
    for l in graph.layers:
        if l.kind == "bn":
            src = by_name.get(l.inputs[0])
            if (src is not None and src.kind == "conv"
                    and consumers.get(src.name) == [l.name] and not src.tap):
                conv = src
                g = new_store.get(l.name + ".gamma").data
                bt = new_store.get(l.name + ".beta").data
                rm = new_store.get(l.name + ".rmean").data
                rv = new_store.get(l.name + ".rvar").data
                scale = g / np.sqrt(rv + l.params.get("eps", BN_EPS))
                w = new_store.get(conv.name + ".w").data
                new_store.put(conv.name + ".w",
                              Tensor(w * scale.reshape(-1, 1, 1, 1)))
                b0 = (new_store.get(conv.name + ".b").data
                      if conv.params.get("bias", False)
                      else np.zeros(conv.params["out_ch"], dtype=w.dtype))
                new_store.put(conv.name + ".b", Tensor(bt + (b0 - rm) * scale))
                for slot in l.weight_slots():
                    new_store.tensors.pop(slot, None)
                # rewire: consumers of the bn now read the conv
                folded[l.name] = conv.name
                # the conv now carries the bn's tap flag and bias
                for nl in new_layers:
                    if nl.name == conv.name:
                        nl.params = dict(nl.params, bias=True)
                        nl.tap = nl.tap or l.tap
                continue
            warnings.warn(f"bn layer '{l.name}' has no foldable preceding conv; left unfused")
        nl = LayerSpec(l.name, l.kind,
                       [folded.get(i, i) for i in l.inputs], dict(l.params), l.tap)
        new_layers.append(nl)

    taps = [folded.get(t, t) for t in graph.taps]
    return (NetworkGraph(new_layers, taps=taps, variant=graph.variant,
                         input_shape=graph.input_shape), new_store)
