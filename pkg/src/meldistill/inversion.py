"""Model-inversion phase: synthesize spectrogram batches from a frozen teacher.

Per update step a fresh latent batch runs through the generator, the frozen
teacher scores it three ways (class confidence on round-robin targets,
divergence from the student, batch-statistics distance at every BN layer),
and the contrastive path rewards agreement with an augmented view plus
time-chunk invariance while pushing away from batch mates and memory-bank
entries. The best batch of each epoch (lowest total loss) joins the bank.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import MODE_TD, MODE_TID, AugmentPlan, sample_augment_plan
from .errors import ConfigError, ContractError, DataError, NumericalAbort
from .nets import Discriminator, Generator, ModelBundle, build_generator, stats_pool
from .tensor import Adam, RngState, Tensor, concat, cross_entropy, kld, no_grad, roll_axis

log = logging.getLogger(__name__)

MIN_CHUNK_FRAMES = 8


# -- time chunking ------------------------------------------------------------


def chunk_bounds(frames: int, k: int, min_chunk_frames: int = MIN_CHUNK_FRAMES) -> list[tuple[int, int]]:
    """Split [0, frames) into k spans: k-1 of floor(frames/k), remainder in the last."""
    if k < 2:
        raise ContractError(f"need at least 2 chunks, got {k}")
    if frames < k * min_chunk_frames:
        raise ContractError(f"{frames} frames cannot make {k} chunks of >= {min_chunk_frames}")
    base = frames // k
    bounds = [(i * base, (i + 1) * base) for i in range(k - 1)]
    bounds.append(((k - 1) * base, frames))
    return bounds


@dataclass
class ChunkSet:
    """Ordered time slices whose concatenation reproduces the source exactly."""

    chunks: list[np.ndarray]
    k: int
    bounds: list[tuple[int, int]]


def chunk_time(data: np.ndarray, k: int, min_chunk_frames: int = MIN_CHUNK_FRAMES) -> ChunkSet:
    """Chunk a [F, T] array along time; deterministic given (T, k)."""
    bounds = chunk_bounds(data.shape[-1], k, min_chunk_frames)
    chunks = [data[..., a:b].copy() for a, b in bounds]
    return ChunkSet(chunks, k, bounds)


# -- contrastive pieces ------------------------------------------------------------


def invariance_term(chunk_embeddings: Tensor) -> Tensor:
    """Mean pairwise cosine similarity over [K, D] unit-norm chunk embeddings."""
    if chunk_embeddings.ndim != 2 or chunk_embeddings.shape[0] < 2:
        raise ContractError(f"invariance_term needs >= 2 embeddings, got shape {chunk_embeddings.shape}")
    k = chunk_embeddings.shape[0]
    sims = (chunk_embeddings @ chunk_embeddings.transpose(1, 0)).clip(-1.0, 1.0)
    mask = Tensor(np.triu(np.ones((k, k), dtype=sims.dtype), 1))
    pairs = k * (k - 1) / 2.0
    return ((sims * mask).sum() * (1.0 / pairs)).clip(-1.0, 1.0)


def contrastive_loss(
    anchors: Tensor,
    positives: Tensor,
    bank_embeddings: Tensor | None,
    invariance: Tensor | None,
    tau: float,
    standard_infonce: bool = False,
) -> Tensor:
    """InfoNCE-style loss over unit embeddings.

    Numerator rewards (anchor . positive) plus the per-sample invariance
    bonus; the denominator sums over the other batch anchors and any bank
    embeddings. `standard_infonce` additionally counts the positive term
    in the denominator.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    b = anchors.shape[0]
    if positives.shape != anchors.shape:
        raise ContractError(f"positives shape {positives.shape} != anchors {anchors.shape}")
    neg_pool = anchors if bank_embeddings is None else concat([anchors, bank_embeddings.detach()], axis=0)
    n_neg = neg_pool.shape[0] - 1  # self excluded
    if n_neg < 1:
        raise ContractError("empty negative set: need batch size >= 2 or a non-empty bank")
    pos_sim = (anchors * positives).sum(axis=1).clip(-1.0, 1.0)
    if invariance is not None:
        pos_sim = pos_sim + invariance
    numerator = pos_sim * (1.0 / tau)

    sims = (anchors @ neg_pool.transpose(1, 0)).clip(-1.0, 1.0)
    mask = np.ones((b, neg_pool.shape[0]), dtype=sims.dtype)
    mask[:, :b][np.eye(b, dtype=bool)] = 0.0
    den = ((sims * (1.0 / tau)).exp() * Tensor(mask)).sum(axis=1)
    if standard_infonce:
        den = den + numerator.exp()
    return -(numerator - den.log()).mean()


# -- deep-inversion pieces ------------------------------------------------------------


def class_confidence_loss(teacher_logits: Tensor, targets: np.ndarray) -> Tensor:
    """Cross entropy of teacher logits against the assigned target classes."""
    return cross_entropy(teacher_logits, targets)


def adversarial_loss(teacher_logits: Tensor, student_logits: Tensor, tau: float) -> Tensor:
    """Negated teacher-student divergence: minimizing seeks disagreement samples."""
    return -kld(teacher_logits, student_logits, tau)


def bn_stats_loss(bn_inputs: list[Tensor], bn_layers) -> Tensor:
    """Distance between batch statistics of each BN input and its running statistics.

    Per layer: ||mu_batch - mu_running||2 + ||sigma_batch - sigma_running||2,
    summed over layers. Differentiable w.r.t. the activations.
    """
    if not bn_layers:
        raise ConfigError("model has no batch-norm layers to match")
    if len(bn_inputs) != len(bn_layers):
        raise ContractError(f"{len(bn_inputs)} captured activations for {len(bn_layers)} BN layers")
    total: Tensor | None = None
    for act, layer in zip(bn_inputs, bn_layers):
        c = act.shape[1]
        mu = act.mean(axis=(0, 2, 3))
        var = ((act - mu.reshape(1, c, 1, 1)) ** 2.0).mean(axis=(0, 2, 3))
        sigma = (var + 1e-8).sqrt()
        mu_ref = Tensor(layer.running_mean.astype(act.dtype))
        sigma_ref = Tensor(np.sqrt(layer.running_var.astype(act.dtype) + 1e-8))
        term = (((mu - mu_ref) ** 2.0).sum()).sqrt() + (((sigma - sigma_ref) ** 2.0).sum()).sqrt()
        total = term if total is None else total + term
    return total


def inversion_loss(bn: Tensor, cls: Tensor, adv: Tensor, alpha: float, beta: float, gamma: float) -> Tensor:
    if min(alpha, beta, gamma) < 0:
        raise ConfigError(f"inversion weights must be >= 0, got {(alpha, beta, gamma)}")
    return bn * alpha + cls * beta + adv * gamma


# -- memory bank -------------------------------------------------------------------------


@dataclass
class BankEntry:
    batch: np.ndarray  # [B, F, T] float32
    epoch: int
    loss: float
    targets: np.ndarray  # [B] int64


@dataclass
class MemoryBank:
    """Growing store of best generated batches, one appended per epoch."""

    entries: list[BankEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def total_items(self) -> int:
        return sum(e.batch.shape[0] for e in self.entries)

    def append(self, batch: np.ndarray, epoch: int, loss: float, targets: np.ndarray) -> None:
        self.entries.append(
            BankEntry(
                batch=np.ascontiguousarray(batch, dtype="<f4"),
                epoch=int(epoch),
                loss=float(loss),
                targets=np.asarray(targets, dtype=np.int64).copy(),
            )
        )

    def sample(self, n: int, rng: RngState) -> np.ndarray:
        """Draw n items uniformly with replacement across every stored item."""
        if not self.entries:
            return np.empty((0, 0, 0), dtype="<f4")
        shape = self.entries[0].batch.shape[1:]
        if n == 0:
            return np.empty((0,) + shape, dtype="<f4")
        flat: list[tuple[int, int]] = []
        for ei, entry in enumerate(self.entries):
            flat.extend((ei, ri) for ri in range(entry.batch.shape[0]))
        picks = rng.choice(len(flat), size=n, replace=True)
        return np.stack([self.entries[flat[p][0]].batch[flat[p][1]] for p in picks])

    def sample_with_targets(self, n: int, rng: RngState) -> tuple[np.ndarray, np.ndarray]:
        if not self.entries:
            raise ContractError("cannot sample from an empty memory bank")
        flat = [(ei, ri) for ei, entry in enumerate(self.entries) for ri in range(entry.batch.shape[0])]
        picks = rng.choice(len(flat), size=n, replace=True)
        batch = np.stack([self.entries[flat[p][0]].batch[flat[p][1]] for p in picks])
        targets = np.asarray([self.entries[flat[p][0]].targets[flat[p][1]] for p in picks], dtype=np.int64)
        return batch, targets

    # -- persistence ---------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        records = []
        for i, entry in enumerate(self.entries):
            name = f"entry_{i:04d}.f32"
            payload = np.ascontiguousarray(entry.batch, dtype="<f4").tobytes(order="C")
            (directory / name).write_bytes(payload)
            records.append(
                {
                    "file": name,
                    "epoch": entry.epoch,
                    "loss": entry.loss,
                    "targets": entry.targets.tolist(),
                    "shape": list(entry.batch.shape),
                    "sha256": hashlib.sha256(payload).hexdigest(),
                }
            )
        manifest = {"format": "meldistill-bank-v1", "entries": records}
        (directory / "bank.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "MemoryBank":
        directory = Path(directory)
        manifest_path = directory / "bank.json"
        if not manifest_path.exists():
            raise DataError(f"no bank manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        bank = cls()
        for rec in manifest["entries"]:
            payload = (directory / rec["file"]).read_bytes()
            if hashlib.sha256(payload).hexdigest() != rec["sha256"]:
                raise DataError(f"bank payload hash mismatch for {rec['file']}")
            batch = np.frombuffer(payload, dtype="<f4").reshape(rec["shape"]).copy()
            bank.entries.append(
                BankEntry(batch=batch, epoch=int(rec["epoch"]), loss=float(rec["loss"]),
                          targets=np.asarray(rec["targets"], dtype=np.int64))
            )
        return bank


def bank_sample(bank: MemoryBank, n: int, rng: RngState) -> np.ndarray:
    return bank.sample(n, rng)


# -- epoch loop --------------------------------------------------------------------------


@dataclass
class InversionSettings:
    alpha: float = 1.0  # BN-statistics weight
    beta: float = 1.0  # class-confidence weight
    gamma: float = 1.0  # adversarial weight
    tau: float = 0.07  # contrastive temperature
    adv_tau: float = 4.0  # logit temperature for the adversarial divergence
    alpha_fic: float = 1.0
    beta_inv: float = 1.0
    k_min: int = 2
    k_max: int = 4
    steps: int = 200
    batch_size: int = 32
    latent_dim: int = 64
    gen_width: int = 128
    lr: float = 2e-2
    min_chunk_frames: int = MIN_CHUNK_FRAMES
    mode: str = MODE_TID
    standard_infonce: bool = False
    first_epoch_gamma_zero: bool = True
    # One latent batch per epoch, jointly optimized with the generator. Resampling
    # z every step decouples latents from their fixed class targets and the
    # generator collapses to class-agnostic output (cross entropy floors at ln C).
    fresh_z_each_step: bool = False

    def validate(self) -> None:
        if self.k_min < 2 or self.k_max < self.k_min:
            raise ConfigError(f"need 2 <= k_min <= k_max, got [{self.k_min}, {self.k_max}]")
        if self.tau <= 0 or self.adv_tau <= 0:
            raise ConfigError("temperatures must be positive")
        if min(self.alpha, self.beta, self.gamma, self.alpha_fic, self.beta_inv) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.mode not in (MODE_TID, MODE_TD):
            raise ConfigError(f"mode must be TID or TD, got {self.mode!r}")


@dataclass
class EpochResult:
    best_batch: np.ndarray
    best_loss: float
    best_step: int
    targets: np.ndarray
    loss_trace: list[float]
    first_batch: np.ndarray
    component_means: dict[str, float]


def _augment_sample(sample: Tensor, plan: AugmentPlan) -> Tensor:
    """Apply a roll/crop plan to one [1, F, T] sample inside the graph."""
    out = sample
    if plan.roll:
        out = roll_axis(out, 2, plan.roll)
    if plan.crop_len:
        out = out.slice_axis(2, plan.crop_start, plan.crop_start + plan.crop_len)
    return out


def _round_robin_targets(batch_size: int, class_count: int) -> np.ndarray:
    return np.arange(batch_size, dtype=np.int64) % class_count


def inversion_epoch(
    teacher: ModelBundle,
    student: ModelBundle,
    disc: Discriminator,
    bank: MemoryBank,
    cfg: InversionSettings,
    rng: RngState,
    epoch: int,
    mel_bins: int,
    frames: int,
    use_fic: bool = True,
    use_finv: bool = True,
) -> EpochResult:
    """Run one inversion epoch with a freshly initialized generator.

    The teacher is treated as frozen (eval mode); the student is only read.
    Updates apply to the generator and, when the contrastive path is active,
    the discriminator head. Returns the epoch's best batch; the caller
    appends it to the bank.
    """
    cfg.validate()
    teacher.eval()
    student.eval()
    dtype = teacher.dtype
    bsz = cfg.batch_size

    required = max(cfg.min_chunk_frames, teacher.min_input_frames())
    feasible_k_max = min(cfg.k_max, frames // required)
    want_finv = use_fic and use_finv and cfg.mode == MODE_TID
    if want_finv and feasible_k_max < cfg.k_min:
        raise ConfigError(
            f"cannot chunk {frames} frames into >= {cfg.k_min} chunks of >= {required}; "
            "reduce k_min or generate longer samples"
        )
    if use_fic and bsz < 2 and len(bank) == 0:
        raise ContractError("contrastive loss needs batch size >= 2 when the bank is empty")

    gen = build_generator(mel_bins, frames, cfg.latent_dim, rng.derive(0), dtype=dtype, width=cfg.gen_width)
    params = list(gen.parameters()) + (list(disc.parameters()) if use_fic else [])
    opt = Adam(params, lr=cfg.lr)

    targets = _round_robin_targets(bsz, teacher.class_count)
    gamma_eff = 0.0 if (epoch == 1 and cfg.first_epoch_gamma_zero) else cfg.gamma

    trace: list[float] = []
    sums = {"fic": 0.0, "cls": 0.0, "adv": 0.0, "bn": 0.0}
    best_loss = np.inf
    best_step = -1
    best_batch: np.ndarray | None = None
    first_batch: np.ndarray | None = None

    epoch_z = Tensor(rng.normal((bsz, cfg.latent_dim)).astype(dtype))
    for step in range(cfg.steps):
        z = Tensor(rng.normal((bsz, cfg.latent_dim)).astype(dtype)) if cfg.fresh_z_each_step else epoch_z
        x = gen.forward(z)

        bn_inputs: list[Tensor] = []
        frame = teacher.forward_frame_level(x, capture_bn_inputs=bn_inputs)
        pooled = stats_pool(frame)
        logits = teacher.classifier(pooled)

        cls = class_confidence_loss(logits, targets)
        bn = bn_stats_loss(bn_inputs, teacher.bn_layers())
        if gamma_eff > 0:
            adv = adversarial_loss(logits, student.forward_logits(x), cfg.adv_tau)
        else:
            adv = Tensor(np.zeros((), dtype=dtype))
        inv = inversion_loss(bn, cls, adv, cfg.alpha, cfg.beta, gamma_eff)

        if use_fic:
            anchors = disc.project(pooled)
            pos_rows = []
            for i in range(bsz):
                plan = sample_augment_plan(frames, cfg.mode, rng)
                view = _augment_sample(x.slice_axis(0, i, i + 1), plan)
                pos_rows.append(disc.project(stats_pool(teacher.forward_frame_level(view))))
            positives = concat(pos_rows, axis=0)

            invariance = None
            if want_finv:
                k = int(rng.integers(cfg.k_min, feasible_k_max))
                bounds = chunk_bounds(frames, k, cfg.min_chunk_frames)
                main = concat([x.slice_axis(2, a, b) for a, b in bounds[:-1]], axis=0)
                main_emb = disc.project(stats_pool(teacher.forward_frame_level(main)))
                tail = x.slice_axis(2, bounds[-1][0], bounds[-1][1])
                tail_emb = disc.project(stats_pool(teacher.forward_frame_level(tail)))
                inv_rows = []
                for i in range(bsz):
                    rows = [main_emb.slice_axis(0, c * bsz + i, c * bsz + i + 1) for c in range(k - 1)]
                    rows.append(tail_emb.slice_axis(0, i, i + 1))
                    inv_rows.append(invariance_term(concat(rows, axis=0)).reshape(1))
                invariance = concat(inv_rows, axis=0)

            bank_emb = None
            if len(bank) > 0:
                drawn = bank.sample(min(bsz, bank.total_items), rng)
                with no_grad():
                    bank_emb = disc.project(teacher.forward_pooled(Tensor(drawn.astype(dtype))))
            fic = contrastive_loss(anchors, positives, bank_emb, invariance, cfg.tau, cfg.standard_infonce)
            total = fic * cfg.alpha_fic + inv * cfg.beta_inv
            sums["fic"] += fic.item()
        else:
            total = inv * cfg.beta_inv

        loss_val = total.item()
        if not np.isfinite(loss_val):
            raise NumericalAbort(f"inversion loss became non-finite at epoch {epoch} step {step}")
        sums["cls"] += cls.item()
        sums["adv"] += adv.item()
        sums["bn"] += bn.item()

        total.backward()
        opt.step()

        trace.append(loss_val)
        if first_batch is None:
            first_batch = x.data.astype("<f4")
        if loss_val < best_loss:
            best_loss = loss_val
            best_step = step
            best_batch = x.data.astype("<f4")

    assert best_batch is not None and first_batch is not None
    means = {name: value / max(len(trace), 1) for name, value in sums.items()}
    return EpochResult(best_batch, float(best_loss), best_step, targets, trace, first_batch, means)
