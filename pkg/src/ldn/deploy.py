"""Deployment helpers: receptive field, halo tiling, memory budgets, FP16 parity."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import AlignmentError, ShapeError
from .models import INPUT, ArchConfig, ModelParams, network
from .ops import _same_pads
from .tensor import cast

PATHS = ("reference-F32", "optimized-F32", "FP16-weights")
PARITY_TOL = 1e-4
FP16_TOL = 5e-3


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("LDN_THREADS", "1")))
    except ValueError:
        return 1


# --- receptive field ------------------------------------------------------

def _input_interval(node, lo: int, hi: int) -> tuple[int, int]:
    if node.op == "conv":
        k, s = node.spec.kernel[0], node.spec.stride
        p = _same_pads(k)[0] if node.spec.padding == "same" else 0
        return s * lo - p, s * hi - p + k - 1
    if node.op in ("tconv", "up"):
        return lo // 2, hi // 2
    return lo, hi


def receptive_radius(config: ArchConfig) -> int:
    """Largest input-space distance at which a pixel can reach an output pixel.

    Dependency intervals are pulled back through the graph for every output
    phase modulo the alignment, because strided stages make the footprint
    depend on where the output pixel sits in the downsampling grid.
    """
    net = network(config)
    m = config.alignment
    radius = 0
    for phase in range(m):
        y = 64 * m + phase
        span = {net.output: (y, y)}
        for node in reversed(net.nodes):
            if node.name not in span:
                continue
            lo, hi = _input_interval(node, *span[node.name])
            for name in node.inputs:
                if name in span:
                    a, b = span[name]
                    span[name] = (min(a, lo), max(b, hi))
                else:
                    span[name] = (lo, hi)
        a, b = span[INPUT]
        radius = max(radius, y - a, b - y)
    return radius


# --- tiling -----------------------------------------------------------------

@dataclass(frozen=True)
class Tile:
    y0: int
    x0: int
    h: int
    w: int
    # input window processed for this tile (includes halo, clamped to the image)
    wy0: int
    wx0: int
    wy1: int
    wx1: int


@dataclass(frozen=True)
class TilePlan:
    image: tuple[int, int]
    tile: tuple[int, int]
    halo: int
    alignment: int
    tiles: tuple[Tile, ...]

    @property
    def padded_halo(self) -> int:
        m = self.alignment
        return -(-self.halo // m) * m

    @property
    def max_window(self) -> tuple[int, int]:
        return (max(t.wy1 - t.wy0 for t in self.tiles), max(t.wx1 - t.wx0 for t in self.tiles))


def make_plan(config: ArchConfig, h: int, w: int, tile: tuple[int, int] | int, halo: Optional[int] = None) -> TilePlan:
    """Cover an ``h x w`` image with aligned tiles; ``halo`` defaults to the receptive radius."""
    th, tw = (tile, tile) if isinstance(tile, int) else tile
    m = config.alignment
    if h % m or w % m:
        raise AlignmentError(f"image {h}x{w} is not a multiple of the model alignment {m}")
    if th <= 0 or tw <= 0 or th % m or tw % m:
        raise AlignmentError(f"tile {th}x{tw} must be a positive multiple of the model alignment {m}")
    needed = receptive_radius(config)
    halo = needed if halo is None else int(halo)
    if halo < needed:
        raise ShapeError(f"halo {halo} is below the receptive radius {needed}; tiled output would differ")
    r = -(-halo // m) * m
    tiles = []
    for y0 in range(0, h, th):
        for x0 in range(0, w, tw):
            hh, ww = min(th, h - y0), min(tw, w - x0)
            tiles.append(Tile(y0, x0, hh, ww, max(0, y0 - r), max(0, x0 - r), min(h, y0 + hh + r), min(w, x0 + ww + r)))
    return TilePlan((h, w), (th, tw), halo, m, tuple(tiles))


def tiling_tolerance(impl: str) -> float:
    """Guaranteed max-abs gap between tiled and whole-image output.

    Only the fixed-order direct kernel is shape-independent; BLAS-backed
    convolution can reorder reductions with the matrix height.
    """
    return 0.0 if impl == "direct" else 1e-6


def tiled_forward(config: ArchConfig, params: ModelParams, x: np.ndarray, plan: TilePlan,
                  impl: str = "direct", threads: Optional[int] = None) -> np.ndarray:
    net = network(config)
    net.check_input(x)
    if tuple(x.shape[1:3]) != plan.image:
        raise ShapeError(f"plan is for {plan.image}, input is {x.shape[1:3]}")
    if plan.alignment != config.alignment:
        raise AlignmentError(f"plan alignment {plan.alignment} != model alignment {config.alignment}")
    needed = receptive_radius(config)
    if plan.halo < needed:
        raise ShapeError(f"halo {plan.halo} is below the receptive radius {needed}")
    out = np.empty(x.shape[:3] + (config.input_channels,), dtype=np.result_type(x.dtype, np.float32))

    def run(t: Tile):
        window = x[:, t.wy0 : t.wy1, t.wx0 : t.wx1, :]
        y = net.forward(params, window, impl=impl)
        oy, ox = t.y0 - t.wy0, t.x0 - t.wx0
        out[:, t.y0 : t.y0 + t.h, t.x0 : t.x0 + t.w, :] = y[:, oy : oy + t.h, ox : ox + t.w, :]

    workers = threads or worker_threads()
    if workers == 1:
        for t in plan.tiles:
            run(t)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, plan.tiles))
    return out


# --- memory --------------------------------------------------------------

@dataclass
class LayerMemory:
    name: str
    op: str
    shape: tuple[int, int, int, int]
    bytes: int
    live_bytes: int


@dataclass
class MemoryEstimate:
    peak_activation_bytes: int
    peak_layer: str
    layers: list[LayerMemory]
    dtype: str
    resolution: tuple[int, int]
    tiled: bool = False

    @property
    def peak_mib(self) -> float:
        return self.peak_activation_bytes / 2 ** 20

    def table(self) -> str:
        lines = [f"{'layer':<28} {'op':<7} {'shape':<24} {'out_MiB':>10} {'live_MiB':>10}"]
        for row in self.layers:
            lines.append(f"{row.name:<28} {row.op:<7} {str(row.shape):<24} "
                         f"{row.bytes / 2 ** 20:10.2f} {row.live_bytes / 2 ** 20:10.2f}")
        lines.append(f"peak {self.peak_mib:.2f} MiB at {self.peak_layer} "
                     f"({self.resolution[0]}x{self.resolution[1]}, {self.dtype}{', per tile' if self.tiled else ''})")
        return "\n".join(lines)


def estimate_memory(config: ArchConfig, h: int, w: int, dtype=np.float16, plan: Optional[TilePlan] = None,
                    batch: int = 1) -> MemoryEstimate:
    """Simulate activation liveness along the execution order.

    A tensor is live from the op that produces it through its last consumer,
    so encoder skip tensors stay resident until the matching decoder stage.
    With a plan, the largest tile window is simulated instead of the image.
    """
    m = config.alignment
    if h % m or w % m:
        raise AlignmentError(f"{h}x{w} is not a multiple of the model alignment {m}")
    if plan is not None:
        h, w = plan.max_window
    net = network(config)
    itemsize = np.dtype(dtype).itemsize

    def size(name):
        c, s = net.tensor_meta[name]
        return batch * (h // s) * (w // s) * c * itemsize

    live = {INPUT: size(INPUT)}
    total = live[INPUT]
    peak, peak_layer, rows = total, INPUT, []
    for i, node in enumerate(net.nodes):
        nbytes = size(node.name)
        live[node.name] = nbytes
        total += nbytes
        c, s = net.tensor_meta[node.name]
        rows.append(LayerMemory(node.name, node.op, (batch, h // s, w // s, c), nbytes, total))
        if total > peak:
            peak, peak_layer = total, node.name
        for name in node.inputs:
            if net.last_use[name] == i and name in live:
                total -= live.pop(name)
    return MemoryEstimate(peak, peak_layer, rows, np.dtype(dtype).name, (h, w), plan is not None)


def fits(estimate: MemoryEstimate, budget_bytes: float) -> bool:
    return estimate.peak_activation_bytes <= budget_bytes


# --- FP16 export and parity -----------------------------------------------

@dataclass
class ExportResult:
    params: ModelParams
    saturated: int


def export_fp16(params: ModelParams) -> ExportResult:
    out, saturated = {}, 0
    for name, arr in params.items():
        if arr.dtype == np.float16:
            out[name] = arr.copy()
            continue
        out[name], n = cast(arr, np.float16, return_saturation=True)
        saturated += n
    return ExportResult(out, saturated)


def run_path(config: ArchConfig, params: ModelParams, x: np.ndarray, path: str) -> np.ndarray:
    net = network(config)
    if path == "reference-F32":
        return net.forward(params, x, impl="direct")
    if path == "optimized-F32":
        return net.forward(params, x, impl="gemm")
    if path == "FP16-weights":
        p16 = export_fp16(params).params
        return net.forward(p16, x, impl="gemm", round_activations_f16=True)
    raise ValueError(f"unknown execution path {path!r}; choose from {PATHS}")


@dataclass
class ParityRow:
    input_id: str
    path_a: str
    path_b: str
    max_abs_dev: float
    passed: bool


@dataclass
class ParityReport:
    rows: list[ParityRow] = field(default_factory=list)
    tolerance: float = PARITY_TOL

    @property
    def max_abs_dev(self) -> float:
        return max((r.max_abs_dev for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def text(self) -> str:
        lines = [f"{r.input_id}: {r.path_a} vs {r.path_b} max_abs_dev={r.max_abs_dev:.3e} "
                 f"{'PASS' if r.passed else 'FAIL'}" for r in self.rows]
        lines.append(f"overall max_abs_dev={self.max_abs_dev:.3e} tolerance={self.tolerance:.1e} "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["input_id", "path_a", "path_b", "max_abs_dev", "pass"])
            for r in self.rows:
                writer.writerow([r.input_id, r.path_a, r.path_b, f"{r.max_abs_dev:.6e}", int(r.passed)])


def parity_check(config: ArchConfig, params: ModelParams, inputs: Sequence[np.ndarray], path_a: str = "reference-F32",
                 path_b: str = "optimized-F32", tolerance: Optional[float] = None,
                 ids: Optional[Sequence[str]] = None) -> ParityReport:
    if tolerance is None:
        tolerance = FP16_TOL if "FP16-weights" in (path_a, path_b) else PARITY_TOL
    ids = list(ids) if ids is not None else [f"input{i:03d}" for i in range(len(inputs))]
    rows = []
    for ident, x in zip(ids, inputs):
        a = run_path(config, params, x, path_a)
        b = a if path_b == path_a else run_path(config, params, x, path_b)
        dev = float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))
        rows.append(ParityRow(ident, path_a, path_b, dev, dev < tolerance))
    return ParityReport(rows, tolerance)
