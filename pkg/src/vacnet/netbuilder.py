"""Architecture DSL, network compilation, and model (de)serialization.

The DSL is line-oriented, one directive per line:

    input C H W
    conv k3 s1 p1 c8 [g1]
    vac dm4 e1:8 e2:4 um8 [pool2] [ps2] [ek3] [g1] [expand:unpool|nearest] [spc0|1]
    pepe p1:8 e1:16 p2:8 e2:32 [k3] [s1]
    res{ ... }res
    gap
    fc 10
    softmax

Options accept either `key:value` or `keyvalue` (``dm4`` == ``dm:4``).
Comment lines start with '#'. A network must end with exactly one
gap -> fc -> softmax tail. Channel counts chain automatically: every layer
reads its input channels from its predecessor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .kernels import ConfigError, ConvSpec, ShapeError
from .pepe import PepeConfig, init_pepe_params, pepe_backward, pepe_forward, pepe_param_count
from .vac import VacConfig, init_vac_params, vac_backward, vac_forward, vac_param_count

MAGIC = b"ACNK"
FORMAT_VERSION = 1


class ParseError(ValueError):
    def __init__(self, message, line, col=1):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


class FormatError(ValueError):
    """Model file is corrupt or has an unsupported version."""


@dataclass(frozen=True)
class ConvLayer:
    spec: ConvSpec


@dataclass(frozen=True)
class GapLayer:
    pass


@dataclass(frozen=True)
class FcLayer:
    c_in: int
    out: int


@dataclass(frozen=True)
class SoftmaxLayer:
    pass


@dataclass(frozen=True)
class ResidualGroup:
    body: tuple


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple  # (c, h, w)
    layers: tuple
    class_count: int
    text: str


# ---------------------------------------------------------------------------
# Parsing

_OPTION_KEYS = {
    "conv": ("k", "s", "p", "c", "g"),
    "vac": ("dm", "e1", "e2", "um", "pool", "ps", "ek", "g", "expand", "spc"),
    "pepe": ("p1", "e1", "p2", "e2", "k", "s"),
}


def _split_option(token, keys, line, col):
    if ":" in token:
        key, _, value = token.partition(":")
        if key not in keys:
            raise ParseError(f"unknown option {key!r}", line, col)
        return key, value
    for key in sorted(keys, key=len, reverse=True):
        if token.startswith(key) and len(token) > len(key):
            return key, token[len(key):]
    raise ParseError(f"cannot parse option {token!r}", line, col)


def _int_value(key, value, line, col):
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"option {key!r} needs an integer, got {value!r}", line, col)


def _parse_options(directive, tokens, line):
    keys = _OPTION_KEYS[directive]
    opts = {}
    for token, col in tokens:
        key, value = _split_option(token, keys, line, col)
        if key in opts:
            raise ParseError(f"duplicate option {key!r}", line, col)
        if key in ("expand",):
            opts[key] = value
        elif key == "p" and value == "same":
            opts[key] = "same"
        else:
            opts[key] = _int_value(key, value, line, col)
    return opts


def parse_dsl(text):
    """Parse DSL text into a validated NetworkSpec."""
    input_shape = None
    layers = []
    stack = [layers]
    res_open_line = []
    cur_c = cur_h = cur_w = None
    tail = []  # seen tail directives, in order

    def err(msg, line, col=1):
        raise ParseError(msg, line, col)

    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = []
        pos = 0
        for tok in raw.split():
            col = raw.index(tok, pos) + 1
            pos = col + len(tok) - 1
            parts.append((tok, col))
        word, wcol = parts[0]
        args = parts[1:]

        if word != "input" and input_shape is None:
            err("first directive must be 'input C H W'", line_no, wcol)
        if tail and word not in ("fc", "softmax", "gap"):
            err(f"{word!r} may not follow the gap/fc/softmax tail", line_no, wcol)

        if word == "input":
            if input_shape is not None:
                err("duplicate 'input' directive", line_no, wcol)
            if len(args) != 3:
                err("'input' takes exactly three integers: C H W", line_no, wcol)
            c, h, w = (_int_value("input", a, line_no, col) for a, col in args)
            if min(c, h, w) < 1:
                err("input dimensions must be >= 1", line_no, wcol)
            input_shape = (c, h, w)
            cur_c, cur_h, cur_w = c, h, w

        elif word == "conv":
            opts = _parse_options("conv", args, line_no)
            if "c" not in opts:
                err("conv requires an output channel count (c)", line_no, wcol)
            k = opts.get("k", 1)
            s = opts.get("s", 1)
            p = opts.get("p", 0)
            if p == "same":
                p = k // 2
            try:
                spec = ConvSpec(cur_c, opts["c"], kernel=(k, k), stride=(s, s),
                                padding=(p, p), groups=opts.get("g", 1))
                oh, ow = spec.out_hw(cur_h, cur_w)
            except (ConfigError, ShapeError) as e:
                err(str(e), line_no, wcol)
            stack[-1].append(ConvLayer(spec))
            cur_c, cur_h, cur_w = spec.c_out, oh, ow

        elif word == "vac":
            opts = _parse_options("vac", args, line_no)
            for req in ("dm", "e1", "e2", "um"):
                if req not in opts:
                    err(f"vac requires option {req!r}", line_no, wcol)
            try:
                cfg = VacConfig(
                    c_in=cur_c, c_down=opts["dm"], e1=opts["e1"], e2=opts["e2"],
                    c_up=opts["um"],
                    pool=(opts.get("pool", 2), opts.get("ps", opts.get("pool", 2))),
                    embed_kernel=opts.get("ek", 3), embed_groups=opts.get("g", 1),
                    per_channel_scale=bool(opts.get("spc", 0)),
                    expand_mode=opts.get("expand", "unpool"))
            except ConfigError as e:
                err(str(e), line_no, wcol)
            if cfg.pool[0] > cur_h or cfg.pool[0] > cur_w:
                err(f"pool kernel {cfg.pool[0]} larger than {cur_h}x{cur_w} input",
                    line_no, wcol)
            stack[-1].append(cfg)
            # output shape == input shape

        elif word == "pepe":
            opts = _parse_options("pepe", args, line_no)
            for req in ("p1", "e1", "p2", "e2"):
                if req not in opts:
                    err(f"pepe requires option {req!r}", line_no, wcol)
            try:
                cfg = PepeConfig(c_in=cur_c, p1=opts["p1"], e1=opts["e1"],
                                 p2=opts["p2"], e2=opts["e2"],
                                 dw_kernel=opts.get("k", 3), stride=opts.get("s", 1))
            except ConfigError as e:
                err(str(e), line_no, wcol)
            stack[-1].append(cfg)
            cur_c = cfg.e2
            cur_h = (cur_h + 2 * (cfg.dw_kernel // 2) - cfg.dw_kernel) // cfg.stride + 1
            cur_w = (cur_w + 2 * (cfg.dw_kernel // 2) - cfg.dw_kernel) // cfg.stride + 1

        elif word == "res{":
            stack.append([])
            res_open_line.append((line_no, cur_c, cur_h, cur_w))

        elif word == "}res":
            if len(stack) == 1:
                err("'}res' without matching 'res{'", line_no, wcol)
            body = stack.pop()
            open_line, c0, h0, w0 = res_open_line.pop()
            if not body:
                err("empty residual group", line_no, wcol)
            if (cur_c, cur_h, cur_w) != (c0, h0, w0):
                err(f"residual group opened at line {open_line} must preserve shape: "
                    f"({c0},{h0},{w0}) vs ({cur_c},{cur_h},{cur_w})", line_no, wcol)
            stack[-1].append(ResidualGroup(tuple(body)))

        elif word == "gap":
            if len(stack) > 1:
                err("tail layers may not sit inside a residual group", line_no, wcol)
            if tail:
                err("duplicate 'gap'", line_no, wcol)
            tail.append("gap")
            stack[-1].append(GapLayer())
            cur_h = cur_w = 1

        elif word == "fc":
            if tail != ["gap"]:
                err("'fc' must directly follow 'gap'", line_no, wcol)
            if len(args) != 1:
                err("'fc' takes exactly one integer", line_no, wcol)
            out = _int_value("fc", args[0][0], line_no, args[0][1])
            if out < 1:
                err("fc output size must be >= 1", line_no, wcol)
            tail.append("fc")
            stack[-1].append(FcLayer(c_in=cur_c, out=out))
            cur_c = out

        elif word == "softmax":
            if tail != ["gap", "fc"]:
                err("'softmax' must directly follow 'fc'", line_no, wcol)
            tail.append("softmax")
            stack[-1].append(SoftmaxLayer())

        else:
            err(f"unknown directive {word!r}", line_no, wcol)

    if input_shape is None:
        raise ParseError("missing 'input' directive", 1)
    if res_open_line:
        raise ParseError("unclosed 'res{' group", res_open_line[-1][0])
    if tail != ["gap", "fc", "softmax"]:
        missing = [t for t in ("gap", "fc", "softmax") if t not in tail]
        raise ParseError(
            f"network must end with gap -> fc -> softmax (missing: {', '.join(missing)})",
            len(text.splitlines()) or 1)

    class_count = next(l.out for l in layers if isinstance(l, FcLayer))
    return NetworkSpec(input_shape=input_shape, layers=tuple(layers),
                       class_count=class_count, text=text)


# ---------------------------------------------------------------------------
# Compiled blocks

class ConvBlock:
    kind = "conv"

    def __init__(self, layer, rng):
        spec = layer.spec
        fan_in = (spec.c_in // spec.groups) * spec.kernel[0] * spec.kernel[1]
        self.spec = spec
        self.w = K.init_weights(spec.weight_shape(), fan_in, rng)
        self.b = np.zeros(spec.c_out)
        self.grads = {}
        self._cache = None

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, x):
        pre = K.conv2d_forward(x, self.w, self.b, self.spec)
        self._cache = (x, pre)
        return K.relu_forward(pre)

    def backward(self, grad):
        x, pre = self._cache
        grad = K.relu_backward(grad, pre)
        gx, gw, gb = K.conv2d_backward(grad, x, self.w, self.spec)
        self.grads = {"w": gw, "b": gb}
        return gx


class VacBlock:
    kind = "vac"

    def __init__(self, config, rng):
        self.config = config
        self.p = init_vac_params(config, rng)
        self.grads = {}
        self._cache = None

    def params(self):
        return self.p.as_list()

    def forward(self, x):
        out, self._cache = vac_forward(x, self.p, self.config)
        return out

    def backward(self, grad):
        gx, gp = vac_backward(grad, self._cache, self.p, self.config)
        self.grads = dict(gp.as_list())
        return gx


class PepeBlock:
    kind = "pepe"

    def __init__(self, config, rng):
        self.config = config
        self.p = init_pepe_params(config, rng)
        self.grads = {}
        self._cache = None

    def params(self):
        return self.p.as_list()

    def forward(self, x):
        out, self._cache = pepe_forward(x, self.p, self.config)
        return out

    def backward(self, grad):
        gx, gp = pepe_backward(grad, self._cache, self.p, self.config)
        self.grads = dict(gp.as_list())
        return gx


class ResidualBlock:
    kind = "res"

    def __init__(self, group, rng):
        self.children = [_compile_layer(l, rng) for l in group.body]
        self.grads = {}

    def params(self):
        return [(f"{i}.{c.kind}.{name}", arr)
                for i, c in enumerate(self.children)
                for name, arr in c.params()]

    def forward(self, x):
        y = x
        for c in self.children:
            y = c.forward(y)
        return x + y

    def backward(self, grad):
        g = grad
        for c in reversed(self.children):
            g = c.backward(g)
        self.grads = {f"{i}.{c.kind}.{name}": arr
                      for i, c in enumerate(self.children)
                      for name, arr in c.grads.items()}
        return grad + g


class GapBlock:
    kind = "gap"

    def __init__(self, layer, rng):
        self.grads = {}
        self._in_shape = None

    def params(self):
        return []

    def forward(self, x):
        self._in_shape = x.shape
        return K.global_avg_pool_forward(x)

    def backward(self, grad):
        return K.global_avg_pool_backward(grad, self._in_shape)


class FcBlock:
    kind = "fc"

    def __init__(self, layer, rng):
        self.w = K.init_weights((layer.out, layer.c_in), layer.c_in, rng)
        self.b = np.zeros(layer.out)
        self.grads = {}
        self._cache = None

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        self._cache = (flat, x.shape)
        return K.fc_forward(flat, self.w, self.b)

    def backward(self, grad):
        flat, in_shape = self._cache
        gx, gw, gb = K.fc_backward(grad, flat, self.w)
        self.grads = {"w": gw, "b": gb}
        return gx.reshape(in_shape)


class SoftmaxBlock:
    kind = "softmax"

    def __init__(self, layer, rng):
        self.grads = {}

    def params(self):
        return []

    def forward(self, x):
        return K.softmax(x)

    def backward(self, grad):  # pragma: no cover - replaced by the fused path
        raise NotImplementedError("softmax gradient is fused with cross-entropy")


def _compile_layer(layer, rng):
    if isinstance(layer, ConvLayer):
        return ConvBlock(layer, rng)
    if isinstance(layer, VacConfig):
        return VacBlock(layer, rng)
    if isinstance(layer, PepeConfig):
        return PepeBlock(layer, rng)
    if isinstance(layer, ResidualGroup):
        return ResidualBlock(layer, rng)
    if isinstance(layer, GapLayer):
        return GapBlock(layer, rng)
    if isinstance(layer, FcLayer):
        return FcBlock(layer, rng)
    if isinstance(layer, SoftmaxLayer):
        return SoftmaxBlock(layer, rng)
    raise ConfigError(f"unknown layer spec {layer!r}")


class Network:
    """Compiled network: ordered blocks with allocated parameters."""

    def __init__(self, spec, seed):
        self.spec = spec
        self.seed = seed
        rng = np.random.Generator(np.random.PCG64(seed))
        self.blocks = [_compile_layer(l, rng) for l in spec.layers]
        self._probs = None

    def parameters(self):
        """All (qualified_name, array) pairs in deterministic order."""
        return [(f"{i}.{b.kind}.{name}", arr)
                for i, b in enumerate(self.blocks)
                for name, arr in b.params()]

    def gradients(self):
        return [(f"{i}.{b.kind}.{name}", arr)
                for i, b in enumerate(self.blocks)
                for name, arr in b.grads.items()]

    def param_count(self):
        return sum(arr.size for _, arr in self.parameters())

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        c, h, w = self.spec.input_shape
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise ShapeError(f"batch shape {x.shape} does not match "
                             f"network input (n, {c}, {h}, {w})")
        for b in self.blocks:
            x = b.forward(x)
        self._probs = x
        return x

    def loss_and_backward(self, labels):
        """Mean cross-entropy of the last forward batch, populating block grads."""
        if self._probs is None:
            raise K.IntegrityError("call forward before loss_and_backward")
        loss = K.cross_entropy(self._probs, labels)
        grad = K.softmax_xent_backward(self._probs, labels)
        for b in reversed(self.blocks[:-1]):  # softmax gradient is fused above
            grad = b.backward(grad)
        return loss


def compile_spec(spec, seed=0):
    return Network(spec, seed)


# ---------------------------------------------------------------------------
# Serialization: magic "ACNK", u32 version, u32 spec-text length, spec text,
# u32 blob count, then per-parameter blobs (u8 tag, payload). Tag 0 is raw
# float64 little-endian; tag 1 (written by the quantization module) is
# int8 values plus per-group scales.

def _write_header(fh, spec_text, n_blobs):
    raw = spec_text.encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", n_blobs))


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated model file while reading {what}")
    return data


def _read_header(fh):
    magic = _read_exact(fh, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    (text_len,) = struct.unpack("<I", _read_exact(fh, 4, "spec length"))
    text = _read_exact(fh, text_len, "spec text").decode("utf-8")
    (n_blobs,) = struct.unpack("<I", _read_exact(fh, 4, "blob count"))
    return text, n_blobs


def save(net, path):
    params = net.parameters()
    with open(path, "wb") as fh:
        _write_header(fh, net.spec.text, len(params))
        for _, arr in params:
            payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(struct.pack("<BQ", 0, len(payload)))
            fh.write(payload)


def load(path):
    with open(path, "rb") as fh:
        text, n_blobs = _read_header(fh)
        spec = parse_dsl(text)
        net = compile_spec(spec, seed=0)
        params = net.parameters()
        if n_blobs != len(params):
            raise FormatError(f"file has {n_blobs} blobs, spec needs {len(params)}")
        for name, arr in params:
            tag, nbytes = struct.unpack("<BQ", _read_exact(fh, 9, f"{name} header"))
            if tag != 0:
                raise FormatError(f"blob {name} has tag {tag}; use the quantized loader")
            data = np.frombuffer(_read_exact(fh, nbytes, name), dtype="<f8")
            if data.size != arr.size:
                raise FormatError(f"blob {name} has {data.size} values, "
                                  f"expected {arr.size}")
            arr[...] = data.reshape(arr.shape)
        if fh.read(1):
            raise FormatError("trailing bytes after final blob")
    return net


# ---------------------------------------------------------------------------
# Reference architectures. The macro-layout keeps attention blocks early and
# projection-expansion blocks late; channel plans are sized for 28x28 / 32x32
# inputs, not for any published large-scale network.

REFERENCE_SPECS = {
    "attendnet-micro-a": """\
input 1 28 28
conv k3 s2 p1 c16
vac dm8 e1:16 e2:8 um16 g2
vac dm8 e1:16 e2:8 um16 g2
conv k3 s2 p1 c32
pepe p1:16 e1:32 p2:16 e2:32
res{
pepe p1:16 e1:32 p2:16 e2:32
}res
gap
fc 10
softmax
""",
    "attendnet-micro-b": """\
input 3 32 32
conv k3 s1 p1 c16
vac dm8 e1:16 e2:8 um16 g2
conv k3 s2 p1 c32
vac dm16 e1:32 e2:16 um32 g4
conv k3 s2 p1 c48
pepe p1:24 e1:48 p2:24 e2:48
res{
pepe p1:24 e1:48 p2:24 e2:48
}res
gap
fc 10
softmax
""",
}


def reference_spec(name):
    try:
        return parse_dsl(REFERENCE_SPECS[name])
    except KeyError:
        raise KeyError(f"unknown reference spec {name!r}; "
                       f"available: {sorted(REFERENCE_SPECS)}")
