"""Distillation phase: match student to teacher on both sides of the pooling layer.

Frame-level hidden states are split into N time chunks; per-chunk means and
pseudo-variances (deviations from the *global* time mean, normalized by the
full length T) are matched through two learned affine projections that map
student channels into teacher channels. The same projections tie the
utterance-level statistics, and a temperature-scaled divergence on logits
carries the classic soft-label signal.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericalAbort
from .inversion import MemoryBank, chunk_bounds
from .nets import ModelBundle, stats_pool
from .tensor import Adam, Parameter, RngState, Tensor, concat, kld, mse, no_grad

log = logging.getLogger(__name__)


class ProjectionPair:
    """Trainable [F_t, F_s] maps for chunk means (w_mean) and pseudo-variances (w_var)."""

    def __init__(self, teacher_dim: int, student_dim: int, dtype=np.float32):
        eye = np.eye(teacher_dim, student_dim, dtype=dtype)
        self.w_mean = Parameter(eye.copy(), "proj.w_mean")
        self.w_var = Parameter(eye.copy(), "proj.w_var")
        self.teacher_dim = teacher_dim
        self.student_dim = student_dim

    def parameters(self) -> list[Parameter]:
        return [self.w_mean, self.w_var]


@dataclass
class ChunkStats:
    """Chunked time statistics of a hidden state [B, F, T].

    With `decomposed` aggregation the chunk pseudo-variances sum to the
    population variance of the full sequence and length-weighted chunk
    means reproduce the overall mean.
    """

    means: Tensor  # [B, F, N]
    pseudo_vars: Tensor  # [B, F, N]
    overall_mean: Tensor  # [B, F]
    overall_pseudo_var: Tensor  # [B, F]
    n: int


def chunk_stats(h: Tensor, n: int, aggregate: str = "decomposed") -> ChunkStats:
    """Per-chunk mean and pseudo-variance along time.

    Chunk n's pseudo-variance is (1/T) * sum over the chunk of squared
    deviations from the overall time mean, so the 1/T factor makes the
    chunks additive. `aggregate` picks how overall statistics are formed:
    'decomposed' (length-weighted mean, summed pseudo-variance) or
    'chunk_mean' (plain average of the per-chunk statistics).
    """
    if h.ndim != 3:
        raise ContractError(f"chunk_stats expects [B, F, T], got {h.shape}")
    frames = h.shape[2]
    if n < 2:
        raise ContractError(f"need at least 2 chunks, got {n}")
    if n > frames:
        raise ContractError(f"cannot cut {frames} frames into {n} chunks")
    if aggregate not in ("decomposed", "chunk_mean"):
        raise ConfigError(f"aggregate must be 'decomposed' or 'chunk_mean', got {aggregate!r}")
    bounds = chunk_bounds(frames, n, min_chunk_frames=1)
    global_mean = h.mean(axis=2)  # [B, F]
    centered_sq = (h - global_mean.reshape(h.shape[0], h.shape[1], 1)) ** 2.0

    mean_cols = []
    pvar_cols = []
    for a, b in bounds:
        mean_cols.append(h.slice_axis(2, a, b).mean(axis=2, keepdims=True))
        pvar_cols.append(centered_sq.slice_axis(2, a, b).sum(axis=2, keepdims=True) * (1.0 / frames))
    means = concat(mean_cols, axis=2)
    pseudo_vars = concat(pvar_cols, axis=2)

    if aggregate == "decomposed":
        weights = np.asarray([(b - a) / frames for a, b in bounds], dtype=h.dtype)
        overall_mean = (means * Tensor(weights.reshape(1, 1, n))).sum(axis=2)
        overall_pvar = pseudo_vars.sum(axis=2)
    else:
        overall_mean = means.mean(axis=2)
        overall_pvar = pseudo_vars.mean(axis=2)
    return ChunkStats(means, pseudo_vars, overall_mean, overall_pvar, n)


def _project(w: Parameter, stats: Tensor) -> Tensor:
    """Apply [F_t, F_s] to [B, F_s, ...]: contract over the channel axis."""
    if stats.ndim == 2:
        return stats @ w.tensor.transpose(1, 0)
    b, f_s, n = stats.shape
    flat = stats.transpose(0, 2, 1).reshape(b * n, f_s)
    return (flat @ w.tensor.transpose(1, 0)).reshape(b, n, w.data.shape[0]).transpose(0, 2, 1)


def frame_stats_loss(teacher_stats: ChunkStats, student_stats: ChunkStats, proj: ProjectionPair) -> Tensor:
    """Mean squared error between projected student and teacher chunk statistics."""
    if teacher_stats.n != student_stats.n:
        raise ContractError(f"chunk counts differ: teacher {teacher_stats.n} vs student {student_stats.n}")
    mean_term = mse(_project(proj.w_mean, student_stats.means), teacher_stats.means.detach())
    var_term = mse(_project(proj.w_var, student_stats.pseudo_vars), teacher_stats.pseudo_vars.detach())
    return mean_term + var_term


def utterance_stats_loss(teacher_stats: ChunkStats, student_stats: ChunkStats, proj: ProjectionPair) -> Tensor:
    """Same projection applied to the aggregated whole-sequence statistics."""
    mean_term = mse(_project(proj.w_mean, student_stats.overall_mean), teacher_stats.overall_mean.detach())
    var_term = mse(_project(proj.w_var, student_stats.overall_pseudo_var), teacher_stats.overall_pseudo_var.detach())
    return mean_term + var_term


def kd_loss(teacher_logits: Tensor, student_logits: Tensor, tau: float) -> Tensor:
    """Soft-label distillation: divergence from detached teacher logits."""
    return kld(teacher_logits.detach(), student_logits, tau)


def distill_loss(kd: Tensor, frame_term: Tensor | None, utterance_term: Tensor | None,
                 eta: float, xi: float) -> Tensor:
    """kd + eta * frame + xi * utterance; zero weights skip their term entirely,
    so eta = xi = 0 is bit-identical to the plain kd loss."""
    if eta < 0 or xi < 0:
        raise ConfigError(f"distillation weights must be >= 0, got eta={eta}, xi={xi}")
    total = kd
    if eta > 0:
        if frame_term is None:
            raise ContractError("eta > 0 requires the frame-level term")
        total = total + frame_term * eta
    if xi > 0:
        if utterance_term is None:
            raise ContractError("xi > 0 requires the utterance-level term")
        total = total + utterance_term * xi
    return total


# -- evaluation ------------------------------------------------------------------


def evaluate_accuracy(model: ModelBundle, feats: np.ndarray, labels: np.ndarray,
                      batch_size: int = 64) -> tuple[float, np.ndarray]:
    """Top-1 accuracy plus a [classes, classes] confusion matrix (rows = truth)."""
    model.eval()
    confusion = np.zeros((model.class_count, model.class_count), dtype=np.int64)
    with no_grad():
        for start in range(0, feats.shape[0], batch_size):
            stop = min(start + batch_size, feats.shape[0])
            logits = model.forward_logits(Tensor(feats[start:stop].astype(model.dtype)))
            preds = logits.data.argmax(axis=1)
            for truth, pred in zip(labels[start:stop], preds):
                confusion[truth, pred] += 1
    accuracy = float(np.trace(confusion)) / max(1, confusion.sum())
    return accuracy, confusion


# -- epoch loop -------------------------------------------------------------------


@dataclass
class DistillSettings:
    eta: float = 1.0
    xi: float = 1.0
    kd_tau: float = 4.0
    n_min: int = 2
    n_max: int = 8
    steps: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    utterance_aggregate: str = "decomposed"

    def validate(self) -> None:
        if self.n_min < 2 or self.n_max < self.n_min:
            raise ConfigError(f"need 2 <= n_min <= n_max, got [{self.n_min}, {self.n_max}]")
        if self.kd_tau <= 0:
            raise ConfigError("kd_tau must be positive")
        if self.eta < 0 or self.xi < 0:
            raise ConfigError("eta and xi must be >= 0")


@dataclass
class KdEpochResult:
    kd_mean: float
    frame_mean: float | None
    utterance_mean: float | None
    loss_trace: list[float]
    eval_accuracy: float | None


def kd_epoch(
    teacher: ModelBundle,
    student: ModelBundle,
    proj: ProjectionPair,
    bank: MemoryBank,
    cfg: DistillSettings,
    rng: RngState,
    eval_data: tuple[np.ndarray, np.ndarray] | None = None,
    optimizer: Adam | None = None,
) -> KdEpochResult:
    """Train the student on bank minibatches for one epoch.

    A shared chunk count N is drawn per batch so teacher and student chunk
    grids align even though their frame rates differ. The teacher is frozen;
    gradients reach the student and, when the reused terms are active, the
    projection pair. Pass `optimizer` to keep Adam state across epochs.
    """
    cfg.validate()
    if len(bank) == 0:
        raise ContractError("distillation needs a non-empty memory bank")
    teacher.eval()
    student.train()
    use_reused = cfg.eta > 0 or cfg.xi > 0
    if optimizer is None:
        params = [p for p in student.parameters()] + (proj.parameters() if use_reused else [])
        optimizer = Adam(params, lr=cfg.lr)

    trace: list[float] = []
    kd_sum = 0.0
    frame_sum = 0.0
    utt_sum = 0.0
    for _ in range(cfg.steps):
        batch = bank.sample(cfg.batch_size, rng).astype(student.dtype)
        n_max = min(cfg.n_max, _max_chunks(teacher, student, batch.shape[2]))
        if use_reused and n_max < cfg.n_min:
            raise ConfigError(f"bank samples too short to cut into {cfg.n_min} chunks at both frame rates")
        x = Tensor(batch)
        with no_grad():
            t_frame = teacher.forward_frame_level(x)
            t_logits = teacher.classifier(stats_pool(t_frame))
        s_frame = student.forward_frame_level(x)
        s_logits = student.classifier(stats_pool(s_frame))

        kd = kd_loss(t_logits, s_logits, cfg.kd_tau)
        frame_term = None
        utt_term = None
        if use_reused:
            n = int(rng.integers(cfg.n_min, n_max))
            t_stats = chunk_stats(t_frame, n, cfg.utterance_aggregate)
            s_stats = chunk_stats(s_frame, n, cfg.utterance_aggregate)
            frame_term = frame_stats_loss(t_stats, s_stats, proj)
            utt_term = utterance_stats_loss(t_stats, s_stats, proj)
            frame_sum += frame_term.item()
            utt_sum += utt_term.item()
        total = distill_loss(kd, frame_term, utt_term, cfg.eta, cfg.xi)
        loss_val = total.item()
        if not np.isfinite(loss_val):
            raise NumericalAbort("distillation loss became non-finite")
        total.backward()
        optimizer.step()
        trace.append(loss_val)
        kd_sum += kd.item()

    steps = max(len(trace), 1)
    accuracy = None
    if eval_data is not None:
        accuracy, _ = evaluate_accuracy(student, eval_data[0], eval_data[1])
    return KdEpochResult(
        kd_mean=kd_sum / steps,
        frame_mean=frame_sum / steps if use_reused else None,
        utterance_mean=utt_sum / steps if use_reused else None,
        loss_trace=trace,
        eval_accuracy=accuracy,
    )


def _max_chunks(teacher: ModelBundle, student: ModelBundle, frames: int) -> int:
    t_frames = _trace_frames(teacher, frames)
    s_frames = _trace_frames(student, frames)
    return min(t_frames, s_frames)


def _trace_frames(model: ModelBundle, frames: int) -> int:
    for _, _, (_, sw) in model.arch_def.blocks:
        frames = (frames - 3) // sw + 1
    return frames
