"""Teacher and student denoisers as static op graphs.

A :class:`Network` compiles an :class:`ArchConfig` into a flat list of
:class:`Node` records in execution order. The same list drives forward
inference, the reverse sweep over an :class:`ActivationTape`, MAC
counting, receptive-field analysis and memory-liveness simulation.

Both topologies end with the global residual ``clip(f(x) + x, 0, 1)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import ops
from .errors import AlignmentError, FormatError, ShapeError, TapeError, WeightMismatchError
from .ops import ConvSpec
from .tensor import DType, round_f16

ModelParams = Dict[str, np.ndarray]

INPUT = "input"


@dataclass(frozen=True)
class ArchConfig:
    kind: str
    level_widths: tuple[int, ...]
    bottleneck_width: int
    blocks: tuple[int, int, int]  # per encoder stage, bottleneck, per decoder stage
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "level_widths", tuple(int(w) for w in self.level_widths))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if self.kind not in ("student", "teacher"):
            raise ValueError(f"kind must be 'student' or 'teacher', got {self.kind!r}")
        if not self.level_widths:
            raise ValueError("at least one encoder level is required")
        widths = (*self.level_widths, self.bottleneck_width)
        if any(w <= 0 or w % 2 for w in widths):
            raise ValueError(f"every width must be a positive even number (blocks split f -> f/2), got {widths}")
        if len(self.blocks) != 3 or min(self.blocks) < 0:
            raise ValueError(f"blocks must be three non-negative counts, got {self.blocks}")
        if self.input_channels <= 0:
            raise ValueError("input_channels must be positive")

    @classmethod
    def student(cls, level_widths=(16, 32, 64, 128), bottleneck_width=256, blocks=(1, 1, 1)) -> "ArchConfig":
        return cls("student", tuple(level_widths), bottleneck_width, tuple(blocks))

    @classmethod
    def teacher(cls, level_widths=(64, 128, 256), bottleneck_width=512, blocks=(2, 2, 2)) -> "ArchConfig":
        return cls("teacher", tuple(level_widths), bottleneck_width, tuple(blocks))

    @property
    def base_width(self) -> int:
        return self.level_widths[0]

    @property
    def num_downsamples(self) -> int:
        return len(self.level_widths)

    @property
    def alignment(self) -> int:
        return 2 ** self.num_downsamples

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "level_widths": list(self.level_widths),
            "bottleneck_width": self.bottleneck_width,
            "blocks": list(self.blocks),
            "input_channels": self.input_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(d["kind"], tuple(d["level_widths"]), int(d["bottleneck_width"]), tuple(d["blocks"]),
                   int(d.get("input_channels", 3)))


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple[str, ...]
    params: tuple[str, ...] = ()
    spec: Optional[ConvSpec] = None
    channels: int = 0
    scale: int = 1  # downsampling factor of the output tensor

    @property
    def attrs(self) -> dict:
        if self.op == "conv":
            return {"stride": self.spec.stride, "padding": self.spec.padding}
        return {}


class _GraphBuilder:
    def __init__(self):
        self.nodes: list[Node] = []
        self.param_shapes: dict[str, tuple[int, ...]] = {}
        self.meta: dict[str, tuple[int, int]] = {}  # tensor -> (channels, scale)
        self.branch_ends: set[str] = set()  # convs whose output is added onto a skip path

    def _emit(self, node: Node) -> str:
        if node.name in self.meta:
            raise ValueError(f"duplicate tensor name {node.name}")
        self.nodes.append(node)
        self.meta[node.name] = (node.channels, node.scale)
        return node.name

    def conv(self, name, x, cout, k=3, stride=1, padding="same"):
        cin, scale = self.meta[x]
        spec = ConvSpec((k, k), stride, padding, cin, cout)
        w, b = f"{name}.weight", f"{name}.bias"
        self.param_shapes[w] = spec.weight_shape
        self.param_shapes[b] = (cout,)
        return self._emit(Node(name, "conv", (x,), (w, b), spec, cout, scale * stride))

    def tconv(self, name, x, cout):
        cin, scale = self.meta[x]
        spec = ConvSpec((2, 2), 2, "valid", cin, cout, transposed=True)
        w, b = f"{name}.weight", f"{name}.bias"
        self.param_shapes[w] = spec.weight_shape
        self.param_shapes[b] = (cout,)
        return self._emit(Node(name, "tconv", (x,), (w, b), spec, cout, scale // 2))

    def act(self, name, x, kind):
        c, s = self.meta[x]
        params = ()
        if kind == "prelu":
            params = (f"{name}.alpha",)
            self.param_shapes[params[0]] = (c,)
        return self._emit(Node(name, kind, (x,), params, None, c, s))

    def up(self, name, x):
        c, s = self.meta[x]
        return self._emit(Node(name, "up", (x,), (), None, c, s // 2))

    def concat(self, name, a, b):
        (ca, sa), (cb, sb) = self.meta[a], self.meta[b]
        assert sa == sb
        return self._emit(Node(name, "concat", (a, b), (), None, ca + cb, sa))

    def add(self, name, a, b):
        return self._emit(Node(name, "add", (a, b), (), None, *self.meta[a]))

    def clip(self, name, x):
        return self._emit(Node(name, "clip", (x,), (), None, *self.meta[x]))


def _lite_block(g: _GraphBuilder, name: str, x: str) -> str:
    f = g.meta[x][0]
    h = g.act(f"{name}.relu1", g.conv(f"{name}.conv1", x, f // 2), "relu")
    h = g.conv(f"{name}.conv2", h, f)
    g.branch_ends.add(h)
    return g.add(f"{name}.add", h, x)


def _dense_block(g: _GraphBuilder, name: str, x: str) -> str:
    f = g.meta[x][0]
    running = x
    for i in (1, 2, 3):
        grp = g.act(f"{name}.prelu{i}", g.conv(f"{name}.conv{i}", running, f // 2), "prelu")
        running = g.concat(f"{name}.cat{i}", running, grp)
    out = g.act(f"{name}.prelu4", g.conv(f"{name}.conv4", running, f), "prelu")
    g.branch_ends.add(f"{name}.conv4")
    return g.add(f"{name}.add", out, x)


def _build_student(cfg: ArchConfig, g: _GraphBuilder) -> None:
    n_enc, n_mid, n_dec = cfg.blocks
    widths = cfg.level_widths
    nexts = (*widths[1:], cfg.bottleneck_width)
    t = g.act("in.relu", g.conv("in.conv", INPUT, widths[0]), "relu")
    skips = []
    for k, f in enumerate(widths):
        for b in range(n_enc):
            t = _lite_block(g, f"enc{k}.lite{b}", t)
        skips.append(t)
        t = g.act(f"enc{k}.down.relu", g.conv(f"enc{k}.down.conv", t, nexts[k], stride=2), "relu")
    for b in range(n_mid):
        t = _lite_block(g, f"mid.lite{b}", t)
    for k in reversed(range(len(widths))):
        f = widths[k]
        t = g.concat(f"dec{k}.cat", g.up(f"dec{k}.up", t), skips[k])
        t = g.act(f"dec{k}.refine.relu", g.conv(f"dec{k}.refine.conv", t, f), "relu")
        for b in range(n_dec):
            t = _lite_block(g, f"dec{k}.lite{b}", t)
    t = g.conv("out.conv", t, cfg.input_channels)
    g.branch_ends.add(t)
    g.clip("out.clip", g.add("out.residual", t, INPUT))


def _build_teacher(cfg: ArchConfig, g: _GraphBuilder) -> None:
    n_enc, n_mid, n_dec = cfg.blocks
    widths = cfg.level_widths
    nexts = (*widths[1:], cfg.bottleneck_width)
    f0 = widths[0]
    t = g.act("in.prelu1", g.conv("in.conv1", INPUT, f0), "prelu")
    t = g.act("in.prelu2", g.conv("in.conv2", t, f0), "prelu")
    skips = []
    for k, f in enumerate(widths):
        for b in range(n_enc):
            t = _dense_block(g, f"enc{k}.dense{b}", t)
        skips.append(t)
        t = g.conv(f"enc{k}.down", t, nexts[k], k=2, stride=2, padding="valid")
    for b in range(n_mid):
        t = _dense_block(g, f"mid.dense{b}", t)
    for k in reversed(range(len(widths))):
        f = widths[k]
        t = g.concat(f"dec{k}.cat", g.tconv(f"dec{k}.tconv", t, f), skips[k])
        t = g.act(f"dec{k}.fuse.prelu", g.conv(f"dec{k}.fuse.conv", t, f), "prelu")
        for b in range(n_dec):
            t = _dense_block(g, f"dec{k}.dense{b}", t)
    t = g.act("out.prelu1", g.conv("out.conv1", t, f0), "prelu")
    t = g.conv("out.conv2", t, cfg.input_channels)
    g.branch_ends.add(t)
    g.clip("out.clip", g.add("out.residual", t, INPUT))


class ActivationTape:
    """Forward inputs of every node, saved for the reverse sweep."""

    def __init__(self):
        self.entries: list[tuple[Node, tuple]] = []
        self.owner: Optional[int] = None
        self.consumed = False

    def __len__(self):
        return len(self.entries)

    def clear(self):
        self.entries.clear()
        self.consumed = True


class Network:
    def __init__(self, config: ArchConfig):
        self.config = config
        g = _GraphBuilder()
        g.meta[INPUT] = (config.input_channels, 1)
        (_build_student if config.kind == "student" else _build_teacher)(config, g)
        self.nodes: list[Node] = g.nodes
        self.param_shapes: dict[str, tuple[int, ...]] = g.param_shapes
        self.tensor_meta = g.meta
        self.branch_end_weights = {f"{name}.weight" for name in g.branch_ends}
        self.output = self.nodes[-1].name
        last_use: dict[str, int] = {}
        for i, node in enumerate(self.nodes):
            for name in node.inputs:
                last_use[name] = i
        self.last_use = last_use

    def __repr__(self):
        return f"Network({self.config!r}, {len(self.nodes)} nodes)"

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes.values())

    def init(self, seed: int = 0, residual_gain: float = 1.0) -> ModelParams:
        """He-normal conv weights, zero biases, PReLU slopes of 0.25.

        ``residual_gain`` scales the std of every conv that feeds a residual
        add (block outputs and the final image conv). Plain He init makes
        each residual block roughly double the activation variance, which
        saturates the output clip for deep configs; a small gain keeps the
        untrained network near the identity denoiser.
        """
        rng = np.random.default_rng(seed)
        params: ModelParams = {}
        for name, shape in self.param_shapes.items():
            if name.endswith(".weight"):
                fan_in = shape[0] * shape[1] * shape[2]
                std = np.sqrt(2.0 / fan_in) * (residual_gain if name in self.branch_end_weights else 1.0)
                params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
            elif name.endswith(".alpha"):
                params[name] = np.full(shape, 0.25, dtype=np.float32)
            else:
                params[name] = np.zeros(shape, dtype=np.float32)
        return params

    def zeros(self) -> ModelParams:
        return {name: np.zeros(shape, dtype=np.float32) for name, shape in self.param_shapes.items()}

    def check_params(self, params: ModelParams) -> None:
        problems = []
        for name, shape in self.param_shapes.items():
            if name not in params:
                problems.append(f"missing {name} {shape}")
            elif tuple(params[name].shape) != shape:
                problems.append(f"{name}: expected {shape}, got {tuple(params[name].shape)}")
        for name in params:
            if name not in self.param_shapes:
                problems.append(f"unexpected {name} {tuple(params[name].shape)}")
        if problems:
            shown = "; ".join(problems[:8]) + ("; ..." if len(problems) > 8 else "")
            raise WeightMismatchError(f"parameters do not match {self.config.kind} architecture "
                                      f"({len(problems)} differences): {shown}")

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4:
            raise ShapeError(f"input must be rank 4 NHWC, got shape {x.shape}")
        if x.shape[-1] != self.config.input_channels:
            raise ShapeError(f"input has {x.shape[-1]} channels, model expects {self.config.input_channels}")
        m = self.config.alignment
        h, w = x.shape[1:3]
        if h % m or w % m or h == 0 or w == 0:
            raise AlignmentError(f"{self.config.kind} with {self.config.num_downsamples} downsampling stages "
                                 f"needs height and width that are multiples of {m}, got {h}x{w}")

    def forward(self, params: ModelParams, x: np.ndarray, tape: Optional[ActivationTape] = None,
                impl: str = ops.DEFAULT_IMPL, round_activations_f16: bool = False) -> np.ndarray:
        """Run the graph. Float16 parameters are widened to float32 for compute;
        ``round_activations_f16`` rounds every op output to the nearest float16."""
        self.check_input(x)
        self.check_params(params)
        p = {k: (v.astype(np.float32) if v.dtype == np.float16 else v) for k, v in params.items()}
        if tape is not None:
            tape.entries.clear()
            tape.owner = id(self)
            tape.consumed = False
        env = {INPUT: x}
        for i, node in enumerate(self.nodes):
            inputs = tuple(env[name] for name in node.inputs)
            node_params = tuple(p[name] for name in node.params)
            kw = node.attrs
            if node.op in ("conv", "tconv"):
                kw["impl"] = impl
            out = ops.apply(node.op, inputs, node_params, **kw)
            if round_activations_f16:
                out = round_f16(out)
            if tape is not None:
                tape.entries.append((node, inputs))
            else:
                for name in node.inputs:
                    if self.last_use[name] == i:
                        env.pop(name, None)
            env[node.name] = out
        return env[self.output]

    def backward(self, params: ModelParams, tape: ActivationTape, upstream: np.ndarray) -> ModelParams:
        """Reverse sweep; returns a gradient for every parameter and the input.

        The input gradient is stored under the key ``"input"``.
        """
        if tape.consumed or tape.owner != id(self) or len(tape) != len(self.nodes):
            raise TapeError("backward needs the tape of a matching forward call, and each tape is single-use")
        out_node, _ = tape.entries[-1]
        grads: dict[str, np.ndarray] = {self.output: upstream}
        pgrads: ModelParams = {}
        for node, inputs in reversed(tape.entries):
            g = grads.pop(node.name, None)
            if g is None:
                continue
            if node is out_node and g.shape != (inputs[0].shape):
                raise ShapeError(f"upstream gradient {g.shape} != output {inputs[0].shape}")
            node_params = tuple(params[name] for name in node.params)
            res = ops.vjp(node.op, inputs, node_params, g, **node.attrs)
            for name, gi in zip(node.inputs, res.inputs):
                grads[name] = grads[name] + gi if name in grads else gi
            for name, gp in zip(node.params, res.params):
                pgrads[name] = gp
        tape.clear()
        out = {name: pgrads.get(name, np.zeros(shape, dtype=params[name].dtype))
               for name, shape in self.param_shapes.items()}
        out[INPUT] = grads.get(INPUT)
        return out


_NETWORKS: dict[ArchConfig, Network] = {}


def network(config: ArchConfig) -> Network:
    """Cached :class:`Network` for a config."""
    net = _NETWORKS.get(config)
    if net is None:
        net = _NETWORKS[config] = Network(config)
    return net


def build(config: ArchConfig, seed: int = 0, residual_gain: float = 1.0) -> ModelParams:
    return network(config).init(seed, residual_gain)


def forward_student(params, x, tape=None, config: ArchConfig | None = None, **kw):
    config = config or ArchConfig.student()
    if config.kind != "student":
        raise ValueError("forward_student needs a student config")
    return network(config).forward(params, x, tape, **kw)


def forward_teacher(params, x, tape=None, config: ArchConfig | None = None, **kw):
    config = config or ArchConfig.teacher()
    if config.kind != "teacher":
        raise ValueError("forward_teacher needs a teacher config")
    return network(config).forward(params, x, tape, **kw)


def backward(config: ArchConfig, params, tape, upstream):
    return network(config).backward(params, tape, upstream)


# --- closed-form counting ---------------------------------------------------

def _conv_params(k, cin, cout):
    return k * k * cin * cout + cout


def _lite_params(f):
    return _conv_params(3, f, f // 2) + _conv_params(3, f // 2, f)


def _dense_params(f):
    h = f // 2
    convs = _conv_params(3, f, h) + _conv_params(3, f + h, h) + _conv_params(3, f + 2 * h, h)
    convs += _conv_params(3, f + 3 * h, f)
    return convs + 3 * h + f  # prelu slopes


def param_count(config: ArchConfig) -> int:
    ws = config.level_widths
    nexts = (*ws[1:], config.bottleneck_width)
    e, m, d = config.blocks
    c_in = config.input_channels
    if config.kind == "student":
        total = _conv_params(3, c_in, ws[0]) + _conv_params(3, ws[0], c_in)
        total += m * _lite_params(config.bottleneck_width)
        for f, nx in zip(ws, nexts):
            total += e * _lite_params(f) + _conv_params(3, f, nx)
            total += _conv_params(3, nx + f, f) + d * _lite_params(f)
        return total
    f0 = ws[0]
    total = _conv_params(3, c_in, f0) + _conv_params(3, f0, f0) + 2 * f0
    total += _conv_params(3, f0, f0) + f0 + _conv_params(3, f0, c_in)
    total += m * _dense_params(config.bottleneck_width)
    for f, nx in zip(ws, nexts):
        total += e * _dense_params(f) + _conv_params(2, f, nx)
        total += _conv_params(2, nx, f) + _conv_params(3, 2 * f, f) + f + d * _dense_params(f)
    return total


def model_macs(config: ArchConfig, h: int, w: int) -> int:
    """Multiply-accumulates for one forward pass on a single ``h x w`` image."""
    m = config.alignment
    if h % m or w % m:
        raise AlignmentError(f"{h}x{w} is not a multiple of {m}")
    ws = config.level_widths
    nexts = (*ws[1:], config.bottleneck_width)
    e, mid, d = config.blocks
    c_in = config.input_channels
    px = [(h >> k) * (w >> k) for k in range(len(ws) + 1)]
    total = 0
    if config.kind == "student":
        total += 9 * c_in * ws[0] * px[0] * 2
        total += mid * 9 * config.bottleneck_width ** 2 * px[-1]
        for k, (f, nx) in enumerate(zip(ws, nexts)):
            total += (e + d) * 9 * f * f * px[k]
            total += 9 * f * nx * px[k + 1]
            total += 9 * (nx + f) * f * px[k]
        return total

    def dense(f):
        hh = f // 2
        return 9 * (f * hh + (f + hh) * hh + (f + 2 * hh) * hh + (f + 3 * hh) * f)

    f0 = ws[0]
    total += 9 * c_in * f0 * px[0] * 2 + 2 * 9 * f0 * f0 * px[0]
    total += mid * dense(config.bottleneck_width) * px[-1]
    for k, (f, nx) in enumerate(zip(ws, nexts)):
        total += (e + d) * dense(f) * px[k]
        total += 2 * 4 * f * nx * px[k + 1]  # downsample conv and transposed upsample
        total += 9 * 2 * f * f * px[k]
    return total


# --- LDNW weight files ------------------------------------------------------

_LDNW_MAGIC = b"LDNW"
_LDNW_VERSION = 1


def save_weights(path: str | Path, params: ModelParams) -> None:
    chunks = [_LDNW_MAGIC, struct.pack("<II", _LDNW_VERSION, len(params))]
    for name, arr in params.items():
        code = DType.of(arr.dtype)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<BB", int(code), arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=code.numpy.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != _LDNW_MAGIC:
        raise FormatError(f"{path}: not an LDNW weight file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _LDNW_VERSION:
        raise FormatError(f"{path}: unsupported LDNW version {version}")
    pos = 12
    params: ModelParams = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            code, rank = struct.unpack_from("<BB", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 2)
            pos += 2 + 4 * rank
            dtype = DType(code).numpy.newbyteorder("<")
            size = int(np.prod(dims)) * dtype.itemsize
            if pos + size > len(raw):
                raise FormatError(f"{path}: truncated payload for {name}")
            params[name] = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=pos) \
                .astype(dtype.newbyteorder("=")).reshape(dims)
            pos += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header ({exc})") from None
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return params
