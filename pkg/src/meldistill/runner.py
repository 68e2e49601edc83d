"""Experiment lifecycle: teacher pre-training, the outer inversion/distillation
loop for every method selector, evaluation, and run manifests.

Every random draw derives from the run seed through fixed stream keys, so a
config + seed pair replays bit-identically under the single-thread flag.
"""
from __future__ import annotations

import ctypes
import dataclasses
import glob
import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from . import __version__
from .audio import CorpusSpec, frame_count, load_corpus, synth_corpus, corpus_arrays, SAMPLE_RATE
from .config import ExperimentConfig
from .distill import (
    DistillSettings,
    ProjectionPair,
    evaluate_accuracy,
    kd_epoch,
    kd_loss,
)
from .errors import ConfigError, DataError
from .inversion import MemoryBank, inversion_epoch
from .nets import Discriminator, ModelBundle, build_model, load_checkpoint, save_checkpoint
from .tensor import Adam, RngState, Tensor, cross_entropy

log = logging.getLogger(__name__)

# stream keys for deriving per-phase RNGs from the run seed
_STREAM_TRAIN_CORPUS = 1
_STREAM_EVAL_CORPUS = 2
_STREAM_TEACHER = 3
_STREAM_STUDENT = 4
_STREAM_DISC = 5
_STREAM_INVERSION = 6
_STREAM_KD = 7
_STREAM_SHUFFLE = 8


def set_blas_threads(n: int) -> None:
    """Set the BLAS thread count of the already-loaded OpenBLAS."""
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    libs_dir = Path(np.__file__).parent.parent / "numpy.libs"
    for lib_path in glob.glob(str(libs_dir / "*openblas*")):
        try:
            lib = ctypes.CDLL(lib_path)
        except OSError:
            continue
        for symbol in (
            "scipy_openblas_set_num_threads64_",
            "openblas_set_num_threads64_",
            "openblas_set_num_threads",
        ):
            fn = getattr(lib, symbol, None)
            if fn is not None:
                fn(n)
                log.debug("set %s threads via %s", lib_path, symbol)
                break


def set_single_thread() -> None:
    """Pin BLAS to one thread for bit-reproducible reductions."""
    set_blas_threads(1)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


# -- corpora ------------------------------------------------------------------


def build_corpora(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(train_feats, train_labels, eval_feats, eval_labels), deterministic per seed."""
    dtype = cfg.run.dtype
    if cfg.data.kind == "dirs":
        train = load_corpus(cfg.data.train_dir)
        held_out = load_corpus(cfg.data.eval_dir)
        tf, tl = corpus_arrays(train, dtype)
        ef, el = corpus_arrays(held_out, dtype)
        return tf, tl, ef, el
    base = CorpusSpec(
        class_count=cfg.data.class_count,
        items_per_class=cfg.data.items_per_class,
        duration_s=cfg.data.duration_s,
        mode=cfg.data.mode,
        mel_bins=cfg.data.mel_bins,
    )
    train = synth_corpus(RngState(cfg.seed).derive(_STREAM_TRAIN_CORPUS), base)
    eval_spec = CorpusSpec(
        class_count=cfg.data.class_count,
        items_per_class=cfg.data.eval_items_per_class,
        duration_s=cfg.data.duration_s,
        mode=cfg.data.mode,
        mel_bins=cfg.data.mel_bins,
    )
    held_out = synth_corpus(RngState(cfg.seed).derive(_STREAM_EVAL_CORPUS), eval_spec)
    tf, tl = corpus_arrays(train, dtype)
    ef, el = corpus_arrays(held_out, dtype)
    return tf, tl, ef, el


def _train_classifier(
    model: ModelBundle,
    feats: np.ndarray,
    labels: np.ndarray,
    eval_feats: np.ndarray,
    eval_labels: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    patience: int,
    rng: RngState,
) -> tuple[float, list[dict]]:
    """Cross-entropy training until the eval accuracy plateaus."""
    opt = Adam(model.parameters(), lr=lr)
    best_acc = -1.0
    since_best = 0
    history: list[dict] = []
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(feats.shape[0])
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            logits = model.forward_logits(Tensor(feats[idx]))
            loss = cross_entropy(logits, labels[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item())
        acc, _ = evaluate_accuracy(model, eval_feats, eval_labels)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "eval_accuracy": acc})
        if acc > best_acc + 1e-9:
            best_acc = acc
            since_best = 0
        else:
            since_best += 1
        if since_best >= patience:
            break
    return best_acc, history


def train_teacher(cfg: ExperimentConfig) -> dict:
    """Pre-train the teacher on labelled data; checkpoint + accuracy report."""
    if cfg.single_thread:
        set_single_thread()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tf, tl, ef, el = build_corpora(cfg)
    teacher = build_model(cfg.arch.teacher, cfg.data.class_count, RngState(cfg.seed).derive(_STREAM_TEACHER),
                          dtype=cfg.run.dtype, role="teacher")
    best_acc, history = _train_classifier(
        teacher, tf, tl, ef, el,
        epochs=cfg.teacher_train.epochs,
        batch_size=cfg.teacher_train.batch_size,
        lr=cfg.teacher_train.lr,
        patience=cfg.teacher_train.patience,
        rng=RngState(cfg.seed).derive(_STREAM_SHUFFLE),
    )
    chance = 1.0 / cfg.data.class_count
    if best_acc < 1.5 * chance:
        raise DataError(
            f"teacher reached {best_acc:.3f} accuracy, below 1.5x chance ({1.5 * chance:.3f}); "
            "corpus looks non-separable"
        )
    teacher.eval()
    base = save_checkpoint(out_dir / "teacher", teacher)
    report = {
        "checkpoint": str(base),
        "eval_accuracy": best_acc,
        "epochs_run": len(history),
        "history": history,
        "seed": cfg.seed,
    }
    _atomic_write(out_dir / "teacher_report.json", json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report


# -- the outer loop ---------------------------------------------------------------


def _metrics_record(epoch: int, seed: int, inv_best, kd_mean, rfl_mean, rul_mean, acc) -> dict:
    return {
        "epoch": epoch,
        "inv_loss_best": inv_best,
        "kd_loss_mean": kd_mean,
        "rfl_mean": rfl_mean,
        "rul_mean": rul_mean,
        "eval_accuracy": acc,
        "seed": seed,
    }


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute the configured method end to end and write a run manifest."""
    if cfg.single_thread:
        set_single_thread()
    started = time.time()
    policy = cfg.policy
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = cfg.run.dtype

    tf, tl, ef, el = build_corpora(cfg)
    frames = tf.shape[2]
    mel_bins = tf.shape[1]

    teacher = None
    if policy.distill_from_teacher:
        if not cfg.teacher_checkpoint:
            raise ConfigError("method requires a teacher: set teacher_checkpoint")
        if not Path(f"{cfg.teacher_checkpoint}.json").exists():
            raise ConfigError(f"teacher checkpoint not found at {cfg.teacher_checkpoint}.json")
        teacher = load_checkpoint(cfg.teacher_checkpoint, dtype=dtype)
        if teacher.class_count != cfg.data.class_count:
            raise ConfigError(
                f"teacher has {teacher.class_count} classes, corpus has {cfg.data.class_count}"
            )
        teacher.eval().freeze()

    student = build_model(cfg.arch.student, cfg.data.class_count, RngState(cfg.seed).derive(_STREAM_STUDENT),
                          dtype=dtype, role="student")
    disc = None
    proj = None
    if policy.data_free:
        disc = Discriminator(2 * teacher.frame_dim, RngState(cfg.seed).derive(_STREAM_DISC),
                             hidden=cfg.arch.disc_hidden, out_dim=cfg.arch.disc_out, dtype=dtype)
    if teacher is not None:
        proj = ProjectionPair(teacher.frame_dim, student.frame_dim, dtype=dtype)

    distill_cfg = dataclasses.replace(cfg.distill)
    if not policy.use_reused:
        distill_cfg.eta = 0.0
        distill_cfg.xi = 0.0

    bank = MemoryBank()
    metrics_path = out_dir / "metrics.jsonl"
    lines: list[str] = []
    student_opt: Adam | None = None
    scratch_opt: Adam | None = None
    acc = None

    for epoch in range(1, cfg.run.epochs + 1):
        inv_best = None
        kd_mean = None
        rfl_mean = None
        rul_mean = None
        if policy.data_free:
            for p in student.parameters():
                p.tensor.requires_grad = False
            result = inversion_epoch(
                teacher, student, disc, bank, cfg.inversion,
                RngState(cfg.seed).derive(_STREAM_INVERSION, epoch),
                epoch=epoch, mel_bins=mel_bins, frames=frames,
                use_fic=policy.use_fic, use_finv=policy.use_finv,
            )
            bank.append(result.best_batch, epoch, result.best_loss, result.targets)
            inv_best = result.best_loss
            for p in student.parameters():
                p.tensor.requires_grad = True
            kd_rng = RngState(cfg.seed).derive(_STREAM_KD, epoch)
            if student_opt is None:
                params = student.parameters() + (proj.parameters() if policy.use_reused else [])
                student_opt = Adam(params, lr=distill_cfg.lr)
            kd_result = kd_epoch(teacher, student, proj, bank, distill_cfg, kd_rng,
                                 eval_data=(ef, el), optimizer=student_opt)
            kd_mean = kd_result.kd_mean
            rfl_mean = kd_result.frame_mean
            rul_mean = kd_result.utterance_mean
            acc = kd_result.eval_accuracy
        elif policy.distill_from_teacher:
            # vanilla KD on the real labelled corpus
            kd_rng = RngState(cfg.seed).derive(_STREAM_KD, epoch)
            if student_opt is None:
                student_opt = Adam(student.parameters(), lr=distill_cfg.lr)
            kd_mean = _kd_on_real_data(teacher, student, tf, distill_cfg, kd_rng, student_opt)
            acc, _ = evaluate_accuracy(student, ef, el)
        else:
            # student from scratch on real labels
            rng = RngState(cfg.seed).derive(_STREAM_KD, epoch)
            if scratch_opt is None:
                scratch_opt = Adam(student.parameters(), lr=distill_cfg.lr)
            kd_mean = _scratch_epoch(student, tf, tl, distill_cfg, rng, scratch_opt)
            acc, _ = evaluate_accuracy(student, ef, el)
        lines.append(_json_line(_metrics_record(epoch, cfg.seed, inv_best, kd_mean, rfl_mean, rul_mean, acc)))

    _atomic_write(metrics_path, "".join(lines))
    student.eval()
    student_base = save_checkpoint(out_dir / "student", student)
    bank_path = None
    if policy.data_free:
        bank_path = out_dir / "bank"
        bank.save(bank_path)

    manifest = {
        "format": "meldistill-run-v1",
        "method": cfg.method,
        "seed": cfg.seed,
        "code_version": __version__,
        "config": cfg.to_dict(),
        "metrics_path": metrics_path.name,
        "checkpoints": {
            "student": student_base.name,
            "teacher": cfg.teacher_checkpoint or None,
        },
        "bank_path": bank_path.name if bank_path else None,
        "bank_entries": len(bank),
        "final_accuracy": acc,
        "wall_clock_s": round(time.time() - started, 3),
    }
    _atomic_write(out_dir / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def _kd_on_real_data(teacher: ModelBundle, student: ModelBundle, feats: np.ndarray,
                     cfg: DistillSettings, rng: RngState, opt: Adam) -> float:
    from .nets import stats_pool
    from .tensor import no_grad

    student.train()
    total = 0.0
    for _ in range(cfg.steps):
        idx = rng.choice(feats.shape[0], size=cfg.batch_size, replace=True)
        x = Tensor(feats[idx])
        with no_grad():
            t_logits = teacher.forward_logits(x)
        loss = kd_loss(t_logits, student.forward_logits(x), cfg.kd_tau)
        loss.backward()
        opt.step()
        total += loss.item()
    return total / max(cfg.steps, 1)


def _scratch_epoch(student: ModelBundle, feats: np.ndarray, labels: np.ndarray,
                   cfg: DistillSettings, rng: RngState, opt: Adam) -> float:
    student.train()
    total = 0.0
    for _ in range(cfg.steps):
        idx = rng.choice(feats.shape[0], size=cfg.batch_size, replace=True)
        loss = cross_entropy(student.forward_logits(Tensor(feats[idx])), labels[idx])
        loss.backward()
        opt.step()
        total += loss.item()
    return total / max(cfg.steps, 1)


# -- evaluation -------------------------------------------------------------------


def evaluate_checkpoint(checkpoint_base: str | Path, cfg: ExperimentConfig,
                        corpus_dir: str | Path | None = None) -> dict:
    """Top-1 accuracy and per-class confusion of a checkpoint on held-out data."""
    if cfg.single_thread:
        set_single_thread()
    model = load_checkpoint(checkpoint_base, dtype=cfg.run.dtype)
    if corpus_dir:
        feats, labels = corpus_arrays(load_corpus(corpus_dir), cfg.run.dtype)
        class_count = int(labels.max()) + 1
    else:
        _, _, feats, labels = build_corpora(cfg)
        class_count = cfg.data.class_count
    if model.class_count != class_count:
        raise ConfigError(f"checkpoint has {model.class_count} classes, corpus has {class_count}")
    acc, confusion = evaluate_accuracy(model, feats, labels)
    return {
        "checkpoint": str(checkpoint_base),
        "accuracy": acc,
        "items": int(confusion.sum()),
        "confusion": confusion.tolist(),
        "per_class_counts": confusion.sum(axis=1).tolist(),
    }


def expected_frame_count(cfg: ExperimentConfig) -> int:
    return frame_count(int(round(cfg.data.duration_s * SAMPLE_RATE)))
