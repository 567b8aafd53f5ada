"""Fidelity metrics under the challenge protocol.

Both metrics drop a 1-pixel border from prediction and reference first.
PSNR uses one MSE over all remaining RGB values. SSIM runs per channel with
an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03 on the [0, 1]
range, averages each SSIM map over the fully-covered window positions and
then averages the channels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import as_tensor4, crop_border

MAX_PSNR_DB = 100.0
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(pred, gt):
    pred, gt = as_tensor4(pred, "prediction"), as_tensor4(gt, "reference")
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs reference {gt.shape}")
    return crop_border(pred).astype(np.float64), crop_border(gt).astype(np.float64)


def psnr(pred, gt, max_db: float = MAX_PSNR_DB) -> float:
    p, g = _pair(pred, gt)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0:
        return max_db
    return min(max_db, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian; the 2-D window is its outer product."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # img (n, h, w, c); separable weighted sum over fully covered windows
    k = g.size
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=2) @ g


def ssim_map(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """SSIM map ``(n, h-10, w-10, c)`` for already-cropped float64 inputs."""
    win = gaussian_window()
    if min(p.shape[1:3]) < WINDOW:
        raise ShapeError(f"SSIM needs at least {WINDOW}x{WINDOW} pixels after the border crop, got {p.shape[1:3]}")
    c1, c2 = K1 ** 2, K2 ** 2
    mu_p, mu_g = _filter_valid(p, win), _filter_valid(g, win)
    var_p = _filter_valid(p * p, win) - mu_p ** 2
    var_g = _filter_valid(g * g, win) - mu_g ** 2
    cov = _filter_valid(p * g, win) - mu_p * mu_g
    num = (2 * mu_p * mu_g + c1) * (2 * cov + c2)
    den = (mu_p ** 2 + mu_g ** 2 + c1) * (var_p + var_g + c2)
    return num / den


def ssim(pred, gt) -> float:
    p, g = _pair(pred, gt)
    per_channel = ssim_map(p, g).mean(axis=(0, 1, 2))
    return float(per_channel.mean())


@dataclass
class ImageScore:
    id: str
    psnr_db: float
    ssim: float


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    per_image: list[ImageScore] = field(default_factory=list)

    @classmethod
    def from_scores(cls, scores: Sequence[ImageScore]) -> "MetricReport":
        scores = list(scores)
        if not scores:
            raise ValueError("no images to aggregate")
        return cls(
            float(np.mean([s.psnr_db for s in scores])),
            float(np.mean([s.ssim for s in scores])),
            scores,
        )

    def table(self) -> str:
        width = max([5] + [len(s.id) for s in self.per_image])
        lines = [f"{'id':<{width}}  {'psnr_db':>9}  {'ssim':>8}"]
        lines += [f"{s.id:<{width}}  {s.psnr_db:9.4f}  {s.ssim:8.5f}" for s in self.per_image]
        lines.append(f"{'mean':<{width}}  {self.psnr_db:9.4f}  {self.ssim:8.5f}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "psnr", "ssim"])
            for s in self.per_image:
                writer.writerow([s.id, f"{s.psnr_db:.6f}", f"{s.ssim:.8f}"])


def evaluate_set(config, params, pairs, impl: str = "gemm", predict=None) -> MetricReport:
    """Run the model over ``pairs`` and score each restored image.

    ``predict`` overrides the model call (used for tiled inference); it gets
    the noisy tensor and returns the restored tensor.
    """
    from .models import network

    net = network(config)
    if predict is None:
        def predict(x):
            return net.forward(params, x, impl=impl)

    scores = []
    for pair in pairs:
        try:
            out = predict(pair.noisy)
            scores.append(ImageScore(pair.id, psnr(out, pair.clean), ssim(out, pair.clean)))
        except ValueError as exc:
            raise type(exc)(f"while evaluating {pair.id!r}: {exc}") from exc
    return MetricReport.from_scores(scores)


def psnr_gaps(reference: MetricReport, candidate: MetricReport) -> list[tuple[str, float]]:
    """Per-image PSNR lead of ``reference`` over ``candidate``, largest first.

    Images are matched by id; both reports must cover the same ids.
    """
    ref = {s.id: s.psnr_db for s in reference.per_image}
    cand = {s.id: s.psnr_db for s in candidate.per_image}
    if set(ref) != set(cand):
        raise ValueError(f"reports cover different images: {sorted(set(ref) ^ set(cand))}")
    return sorted(((k, ref[k] - cand[k]) for k in ref), key=lambda kv: (-kv[1], kv[0]))
