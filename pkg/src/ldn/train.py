"""Optimization loop for supervised and distilled training.

Adam with bias correction, per-epoch cosine annealing, joint L2-norm
gradient clipping, and a crop schedule that grows the training context.
A fine-tuning phase after ``epochs`` restarts the cosine schedule with
``T_max = finetune_epochs``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import ImagePair, augment, extract_crop
from .errors import AlignmentError, ShapeError
from .losses import LossWeights, loss_backward, loss_total
from .metrics import evaluate_set
from .models import INPUT, ActivationTape, ArchConfig, ModelParams, network, save_weights


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    t_max: int = 200
    clip_norm: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    crop_schedule: tuple[tuple[int, int], ...] = ((0, 32),)
    finetune_epochs: int = 0
    seed: int = 0
    steps_per_epoch: Optional[int] = None  # default: one pass over the training pairs
    init_residual_gain: float = 0.1
    impl: str = "gemm"

    def __post_init__(self):
        object.__setattr__(self, "crop_schedule", tuple((int(e), int(c)) for e, c in self.crop_schedule))
        starts = [e for e, _ in self.crop_schedule]
        if not starts or starts[0] != 0:
            raise ValueError("crop_schedule must start at epoch 0")
        if starts != sorted(starts) or len(set(starts)) != len(starts):
            raise ValueError(f"crop_schedule start epochs must be strictly increasing: {starts}")
        if self.epochs < 0 or self.finetune_epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs, finetune_epochs and batch_size must be non-negative / positive")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")

    @property
    def total_epochs(self) -> int:
        return self.epochs + self.finetune_epochs

    def crop_for_epoch(self, epoch: int) -> int:
        size = self.crop_schedule[0][1]
        for start, crop in self.crop_schedule:
            if epoch >= start:
                size = crop
        return size


def cosine_lr(t: float, cfg: TrainConfig, t_max: Optional[float] = None) -> float:
    """``lr_min + (lr_max - lr_min) * (1 + cos(pi t / T_max)) / 2``, held at lr_min past T_max."""
    t_max = cfg.t_max if t_max is None else t_max
    if t >= t_max:
        return cfg.lr_min
    t = max(t, 0.0)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / t_max))


def lr_for_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < cfg.epochs:
        return cosine_lr(epoch, cfg)
    return cosine_lr(epoch - cfg.epochs, cfg, t_max=cfg.finetune_epochs)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 0.1) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly) rescaled gradients and the norm before clipping.
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
              cfg: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_params[name] = (p - update).astype(p.dtype)
        m_new[name], v_new[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_params, OptimizerState(m_new, v_new, t)


class FrozenTeacher:
    """Inference-only wrapper; the parameter arrays are made read-only."""

    def __init__(self, config: ArchConfig, params: ModelParams, impl: str = "gemm"):
        self.config = config
        self.net = network(config)
        self.net.check_params(params)
        self.params = {k: np.array(v, copy=True) for k, v in params.items()}
        for arr in self.params.values():
            arr.setflags(write=False)
        self.impl = impl

    @property
    def alignment(self) -> int:
        return self.config.alignment

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(self.params, x, impl=self.impl)


Teacher = Callable[[np.ndarray], np.ndarray]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    crop: int
    l_total: float
    val_psnr: float


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    best_epoch: int
    best_psnr: float
    log: list[EpochRecord] = field(default_factory=list)


def _batch(pairs: Sequence[ImagePair], idx, crop: int, rng) -> tuple[np.ndarray, np.ndarray]:
    noisy, clean = [], []
    for i in idx:
        pair = extract_crop(augment(pairs[i], rng), crop, rng)
        noisy.append(pair.noisy)
        clean.append(pair.clean)
    return np.concatenate(noisy), np.concatenate(clean)


def format_log(cfg: TrainConfig, weights: LossWeights, config: ArchConfig, log: Sequence[EpochRecord]) -> str:
    lines = [f"# {k} = {v}" for k, v in asdict(cfg).items()]
    lines += [f"# arch.{k} = {v}" for k, v in config.as_dict().items()]
    lines += [f"# lambda_gt = {weights.lambda_gt}", f"# lambda_distill = {weights.lambda_distill}",
              f"# lambda_l1 = {weights.lambda_l1}", f"# alpha = {weights.alpha}",
              "epoch,lr,l_total,val_psnr"]
    lines += [f"{r.epoch},{r.lr:.9g},{r.l_total:.9g},{r.val_psnr:.6f}" for r in log]
    return "\n".join(lines) + "\n"


def _check_alignment(config: ArchConfig, cfg: TrainConfig, teacher: Optional[Teacher]):
    needed = config.alignment
    t_align = getattr(teacher, "alignment", 1) if teacher is not None else 1
    for _, crop in cfg.crop_schedule:
        if crop % needed:
            raise AlignmentError(f"crop {crop} is not a multiple of the student alignment {needed}")
        if crop % t_align:
            raise AlignmentError(f"crop {crop} is not a multiple of the teacher alignment {t_align}")


def train(config: ArchConfig, train_pairs: Sequence[ImagePair], cfg: TrainConfig,
          weights: LossWeights, teacher: Optional[Teacher] = None,
          val_pairs: Optional[Sequence[ImagePair]] = None, init_params: Optional[ModelParams] = None,
          checkpoint_dir: Optional[str | Path] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    net = network(config)
    if not train_pairs:
        raise ValueError("no training pairs")
    channels = train_pairs[0].noisy.shape[-1]
    if channels != config.input_channels:
        raise ShapeError(f"data has {channels} channels, model expects {config.input_channels}")
    if weights.lambda_distill and teacher is None:
        raise ValueError("lambda_distill > 0 needs a teacher")
    _check_alignment(config, cfg, teacher)

    params = net.init(cfg.seed, cfg.init_residual_gain) if init_params is None else {k: v.copy() for k, v in init_params.items()}
    net.check_params(params)
    state = OptimizerState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    steps = cfg.steps_per_epoch or max(1, len(train_pairs) // cfg.batch_size)
    best_params, best_psnr, best_epoch = params, -math.inf, -1
    log: list[EpochRecord] = []

    for epoch in range(cfg.total_epochs):
        lr = lr_for_epoch(epoch, cfg)
        crop = cfg.crop_for_epoch(epoch)
        order = rng.permutation(len(train_pairs))
        pos, losses = 0, []
        for _ in range(steps):
            if pos + cfg.batch_size > len(order):
                order, pos = rng.permutation(len(train_pairs)), 0
            idx = order[pos : pos + cfg.batch_size]
            pos += cfg.batch_size
            noisy, clean = _batch(train_pairs, idx, crop, rng)
            tape = ActivationTape()
            out = net.forward(params, noisy, tape, impl=cfg.impl)
            target = teacher(noisy) if weights.lambda_distill else None
            if target is not None and target.shape != out.shape:
                raise ShapeError(f"teacher output {target.shape} vs student output {out.shape}")
            report = loss_total(out, target, clean, weights)
            grads = net.backward(params, tape, loss_backward(report))
            grads.pop(INPUT, None)
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            params, state = adam_step(params, grads, state, lr, cfg)
            losses.append(report.l_total)
        val_psnr = math.nan
        if val_pairs:
            val_psnr = evaluate_set(config, params, val_pairs, impl=cfg.impl).psnr_db
            if val_psnr > best_psnr:
                best_params, best_psnr, best_epoch = params, val_psnr, epoch
        record = EpochRecord(epoch, lr, crop, float(np.mean(losses)), val_psnr)
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)

    if not val_pairs:
        best_params, best_epoch = params, cfg.total_epochs - 1
    result = TrainResult(params, best_params, best_epoch, best_psnr, log)
    if checkpoint_dir is not None:
        write_checkpoint(checkpoint_dir, result, cfg, weights, config)
    return result


def write_checkpoint(directory, result: TrainResult, cfg: TrainConfig, weights: LossWeights,
                     config: ArchConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_weights(directory / "best.ldnw", result.best_params)
    save_weights(directory / "last.ldnw", result.params)
    (directory / "train_log.txt").write_text(format_log(cfg, weights, config, result.log))


def train_supervised(config: ArchConfig, train_pairs, cfg: TrainConfig, val_pairs=None,
                     weights: LossWeights = LossWeights.supervised(), **kw) -> TrainResult:
    if weights.lambda_distill:
        raise ValueError("supervised training uses lambda_distill = 0")
    return train(config, train_pairs, cfg, weights, None, val_pairs, **kw)


def train_distilled(config: ArchConfig, teacher: Teacher, train_pairs, cfg: TrainConfig, val_pairs=None,
                    weights: LossWeights = LossWeights(), **kw) -> TrainResult:
    """Student training against ground truth plus a frozen teacher's outputs."""
    return train(config, train_pairs, cfg, weights, teacher, val_pairs, **kw)
