"""The full adaptive semi-supervised training loop.

Each iteration: weak-augment the labeled batch and compute the supervised
loss; weak-augment the unlabeled batch, pseudo-label it with the teacher,
score the pseudo-labels, build photometric (strong) student views, fuse
windows per the fusion mode, compute the consistency loss against the
(fused) pseudo-labels, take one SGD step, then update the teacher through
the gated EMA. Evaluation runs on the validation set once per epoch.

Determinism: every random choice draws from a named stream derived from
the master seed (see rngstreams), so two runs with the same config are
byte-identical, and disabled code paths consume no randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import rngstreams as rs
from .ema_gate import GATE_LOG_HEADER, EmaGateConfig, GateDecision, gate_and_update
from .fusion import (
    DONOR_LABELED,
    FUSION_LOG_HEADER,
    FusionDecision,
    ada_fuse_batch,
)
from .model import (
    ModelParams,
    OptimizerState,
    add_gradients,
    backward,
    ema_update,
    forward,
    forward_batch,
    init_optimizer,
    init_params,
    load_checkpoint,
    quantize_checkpoint_precision,
    save_checkpoint,
    sgd_step,
)
from .numerics import (
    IGNORE,
    ConfusionCounts,
    ImagePair,
    confusion,
    cross_entropy,
    cross_entropy_grad,
    iou_changed,
    oa,
    softmax,
)
from .schedule import RampConfig, lambda_weight, learning_rate
from .synthdata import SceneSpec, apply_geo, apply_geo_pair, make_splits, photometric_augment, sample_geo
from .uncertainty import batch_class_weights, sample_uncertainty, score_map

EMA_MODES = ("ada", "plain", "off-teacher-equals-student")

METRICS_CSV_HEADER = (
    "iter,epoch,loss_s,loss_u,lambda,lr,val_iou_c,val_oa,"
    "mean_teacher_u,epsilon,tau,ema_updated,fusion_labeled_frac,pl_iou"
)


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message: str, record: "MetricsRecord"):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainerConfig:
    scene: SceneSpec = SceneSpec()
    n_total: int = 240
    n_val: Optional[int] = None  # None: 20% of n_total
    label_ratio: float = 0.05
    epochs: int = 30
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    lr0: float = 0.01
    lr_min: float = 1e-4
    momentum: float = 0.9
    confidence_threshold: float = 0.95
    w_max: float = 10.0
    phi: float = 5.0
    gamma: float = 0.1
    ema: EmaGateConfig = EmaGateConfig()
    ema_mode: str = "ada"
    fusion_mode: str = "af"
    fusion_ratio_lo: float = 0.25
    fusion_ratio_hi: float = 0.5
    fusion_invert: bool = False
    metric_mode: str = "uncertainty"
    seed: int = 0
    dtype: str = "float32"
    iter_total: int = 0  # resolved by run()

    def __post_init__(self):
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if not 0.5 < self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must be in (0.5, 1]")
        if self.ema_mode not in EMA_MODES:
            raise ValueError(f"ema_mode must be one of {EMA_MODES}")

    @property
    def np_dtype(self):
        if self.dtype == "float32":
            return np.float32
        if self.dtype == "float64":
            return np.float64
        raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def sup_only(self) -> bool:
        return self.w_max == 0.0

    def ramp(self) -> RampConfig:
        return RampConfig(self.w_max, self.phi, self.gamma, max(1, self.iter_total))


@dataclass
class TrainState:
    student: ModelParams
    teacher: ModelParams
    optimizer: OptimizerState
    iteration: int = 0


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    loss_s: float
    loss_u: float
    lam: float
    lr: float
    val_iou_c: Optional[float] = None
    val_oa: Optional[float] = None
    mean_teacher_u: Optional[float] = None
    epsilon: Optional[float] = None
    tau: Optional[float] = None
    ema_updated: Optional[bool] = None
    fusion_labeled_frac: Optional[float] = None
    pl_iou: Optional[float] = None
    # per-sample decisions for the side logs; not CSV columns
    fusion_decisions: List[FusionDecision] = field(default_factory=list)
    gate_decision: Optional[GateDecision] = None

    def to_csv_row(self) -> str:
        cells = [
            str(self.iteration),
            str(self.epoch),
            _fmt(self.loss_s),
            _fmt(self.loss_u),
            _fmt(self.lam),
            _fmt(self.lr),
            _fmt(self.val_iou_c),
            _fmt(self.val_oa),
            _fmt(self.mean_teacher_u),
            _fmt(self.epsilon),
            _fmt(self.tau),
            "" if self.ema_updated is None else str(int(self.ema_updated)),
            _fmt(self.fusion_labeled_frac),
            _fmt(self.pl_iou),
        ]
        return ",".join(cells)


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else format(float(x), ".10g")


def pseudo_label(
    teacher: ModelParams, weak_pair: ImagePair, threshold: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Teacher argmax mask with sub-threshold pixels set to IGNORE, plus probabilities."""
    logits, _ = forward(teacher, weak_pair)
    probs = softmax(logits)
    return _mask_from_probs(probs, threshold), probs


def _mask_from_probs(probs: np.ndarray, threshold: float) -> np.ndarray:
    am = (probs[1] > probs[0]).astype(np.int8)
    keep = probs.max(axis=0) >= threshold
    return np.where(keep, am, IGNORE).astype(np.int8)


def _batch_probs(params: ModelParams, views: Sequence[ImagePair]) -> List[np.ndarray]:
    logits, _ = forward_batch(params, views)
    return [softmax(logits[i]) for i in range(len(views))]


def train_step(
    state: TrainState,
    labeled_batch: Sequence[ImagePair],
    unlabeled_batch: Sequence[ImagePair],
    cfg: TrainerConfig,
    pl_truths: Optional[Sequence[np.ndarray]] = None,
) -> Tuple[TrainState, MetricsRecord]:
    """One optimization step; returns the new state and its metrics record.

    `pl_truths` is the metrics-only mapping to the withheld ground truth
    of the unlabeled batch (for the pseudo-label quality column); the
    training computation never reads it. Unlabeled pairs must arrive with
    truth stripped.
    """
    it = state.iteration
    lam = lambda_weight(it, cfg.ramp())
    lr = learning_rate(it, max(1, cfg.iter_total), cfg.lr0, cfg.lr_min)
    seed = cfg.seed

    labeled_views = []
    labeled_masks = []
    for k, pair in enumerate(labeled_batch):
        gp = sample_geo(rs.derive_rng(seed, rs.AUG_L, it, k), pair.height, pair.width)
        view = apply_geo_pair(pair, gp)
        labeled_views.append(view)
        labeled_masks.append(view.truth)

    record = MetricsRecord(
        iteration=it,
        epoch=0,
        loss_s=0.0,
        loss_u=0.0,
        lam=lam,
        lr=lr,
    )

    if cfg.sup_only or len(unlabeled_batch) == 0:
        logits_l, cache_l = forward_batch(state.student, labeled_views)
        _check_finite(logits_l, record, it)
        probs_l = [softmax(logits_l[i]) for i in range(len(labeled_views))]
        loss_s = float(
            np.mean([cross_entropy(probs_l[i], labeled_masks[i]) for i in range(len(probs_l))])
        )
        record.loss_s = loss_s
        if not math.isfinite(loss_s):
            raise NonFiniteLossError(f"non-finite supervised loss at iteration {it}", record)
        dlog = np.stack(
            [cross_entropy_grad(probs_l[i], labeled_masks[i]) for i in range(len(probs_l))]
        ) / len(labeled_views)
        grads = backward(state.student, cache_l, dlog)
        student, opt = sgd_step(state.student, grads, state.optimizer, lr)
        new_state = TrainState(student, state.teacher, opt, it + 1)
        return new_state, record

    # (a) weak views and teacher pseudo-labels
    weak_views = []
    geo_params = []
    for j, pair in enumerate(unlabeled_batch):
        if pair.truth is not None:
            raise ValueError("unlabeled training pairs must have truth stripped")
        gp = sample_geo(rs.derive_rng(seed, rs.AUG_U, it, j), pair.height, pair.width)
        weak_views.append(apply_geo_pair(pair, gp))
        geo_params.append(gp)
    probs_tea = _batch_probs(state.teacher, weak_views)
    pseudo_masks = [_mask_from_probs(p, cfg.confidence_threshold) for p in probs_tea]
    argmax_masks = [(p[1] > p[0]).astype(np.int8) for p in probs_tea]

    # (b) batch class weights and pseudo-label scores
    weights = batch_class_weights(argmax_masks)
    tea_maps = [score_map(p, weights, cfg.metric_mode) for p in probs_tea]
    tea_scores = [sample_uncertainty(m) for m in tea_maps]
    record.mean_teacher_u = float(np.mean(tea_scores))

    # (c) strong views and adaptive fusion
    strong_views = []
    for j, view in enumerate(weak_views):
        srng = rs.derive_rng(seed, rs.STRONG, it, j)
        strong_views.append(
            replace(
                view,
                img_a=photometric_augment(view.img_a, srng),
                img_b=photometric_augment(view.img_b, srng),
            )
        )
    fused_views, fused_masks, decisions = ada_fuse_batch(
        strong_views,
        pseudo_masks,
        tea_maps,
        tea_scores,
        labeled_views,
        labeled_masks,
        rs.derive_rng(seed, rs.FUSION, it),
        cfg.fusion_mode,
        cfg.fusion_ratio_lo,
        cfg.fusion_ratio_hi,
        cfg.fusion_invert,
    )
    record.fusion_decisions = decisions
    if decisions:
        record.fusion_labeled_frac = sum(
            1 for d in decisions if d.donor_kind == DONOR_LABELED
        ) / len(decisions)

    # (d) losses
    logits_l, cache_l = forward_batch(state.student, labeled_views)
    probs_l = [softmax(logits_l[i]) for i in range(len(labeled_views))]
    loss_s = float(
        np.mean([cross_entropy(probs_l[i], labeled_masks[i]) for i in range(len(probs_l))])
    )
    logits_u, cache_u = forward_batch(state.student, fused_views)
    probs_u = [softmax(logits_u[i]) for i in range(len(fused_views))]
    loss_u = float(
        np.mean([cross_entropy(probs_u[i], fused_masks[i]) for i in range(len(probs_u))])
    )
    record.loss_s = loss_s
    record.loss_u = loss_u
    total = loss_s + lam * loss_u
    if not math.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss at iteration {it}", record)

    # (e) gradients and the SGD step
    dlog_l = np.stack(
        [cross_entropy_grad(probs_l[i], labeled_masks[i]) for i in range(len(probs_l))]
    ) / len(labeled_views)
    dlog_u = np.stack(
        [cross_entropy_grad(probs_u[i], fused_masks[i]) for i in range(len(probs_u))]
    ) * (lam / len(fused_views))
    grads = add_gradients(
        backward(state.student, cache_l, dlog_l),
        backward(state.student, cache_u, dlog_u),
    )
    student, opt = sgd_step(state.student, grads, state.optimizer, lr)

    # (f) teacher update
    if cfg.ema_mode == "ada":
        probs_stu = _batch_probs(student, weak_views)
        stu_argmax = [(p[1] > p[0]).astype(np.int8) for p in probs_stu]
        stu_weights = batch_class_weights(stu_argmax)
        stu_maps = [score_map(p, stu_weights, cfg.metric_mode) for p in probs_stu]
        teacher, gate = gate_and_update(
            state.teacher,
            student,
            stu_maps,
            tea_maps,
            it + 1,  # 1-based at the first gated call
            cfg.ema,
            rs.derive_rng(seed, rs.GATE, it),
        )
        record.gate_decision = gate
        record.epsilon = gate.epsilon_value
        record.tau = gate.tau
        record.ema_updated = gate.updated
    elif cfg.ema_mode == "plain":
        teacher = ema_update(state.teacher, student, cfg.ema.beta)
        record.ema_updated = True
    else:  # off-teacher-equals-student
        teacher = student.copy()
        record.ema_updated = True

    # (g) pseudo-label quality against the withheld truth (metrics path only)
    if pl_truths is not None:
        counts = ConfusionCounts()
        for j in range(len(unlabeled_batch)):
            t = apply_geo(pl_truths[j], geo_params[j], nearest=True)
            t = np.where(pseudo_masks[j] != IGNORE, t, IGNORE).astype(np.int8)
            counts = counts + confusion(pseudo_masks[j], t)
        record.pl_iou = iou_changed(counts)

    return TrainState(student, teacher, opt, it + 1), record


def evaluate(params: ModelParams, val_pairs: Sequence[ImagePair], chunk: int = 8) -> Tuple[float, float]:
    """Aggregate confusion counts over the whole set, then the two metrics."""
    if len(val_pairs) == 0:
        raise ValueError("empty validation set")
    counts = ConfusionCounts()
    for start in range(0, len(val_pairs), chunk):
        batch = val_pairs[start : start + chunk]
        logits, _ = forward_batch(params, batch)
        for i, pair in enumerate(batch):
            if pair.truth is None:
                raise ValueError("validation pairs need ground truth")
            pred = (logits[i, 1] > logits[i, 0]).astype(np.int8)
            counts = counts + confusion(pred, pair.truth)
    return iou_changed(counts), oa(counts)


def run(cfg: TrainerConfig, out_dir=None) -> Tuple[List[MetricsRecord], Tuple[float, float]]:
    """Train per config; returns (records, final (IoU_c, OA) of the student).

    With `out_dir` set, writes metrics.csv, fusion_log.csv, gate_log.csv
    and the student/teacher checkpoints there. The final evaluation runs
    on parameters rounded to checkpoint precision, so evaluating the
    written checkpoint reproduces the last metrics row exactly.
    """
    scene = replace(cfg.scene, seed=cfg.seed)
    split = make_splits(scene, cfg.n_total, cfg.label_ratio, cfg.seed, cfg.n_val)
    unlabeled_train = [replace(p, truth=None) for p in split.unlabeled]
    unlabeled_truths = [p.truth for p in split.unlabeled]

    n_l, n_u = len(split.labeled), len(unlabeled_train)
    if n_u >= cfg.batch_unlabeled:
        iters_per_epoch = n_u // cfg.batch_unlabeled
    elif n_u > 0:
        iters_per_epoch = 1
    else:
        iters_per_epoch = max(1, n_l // cfg.batch_labeled)
    cfg = replace(cfg, iter_total=cfg.epochs * iters_per_epoch)

    dtype = cfg.np_dtype
    student = init_params(rs.derive_rng(cfg.seed, rs.INIT), cfg.scene.channels, dtype)
    state = TrainState(student, student.copy(), init_optimizer(student, cfg.momentum))

    labeled_cursor = _Cycler(cfg.seed, rs.BATCH_L, n_l)
    records: List[MetricsRecord] = []
    writer = _LogWriter(out_dir)
    try:
        for epoch in range(cfg.epochs):
            if n_u > 0:
                order = rs.derive_rng(cfg.seed, rs.BATCH_U, epoch).permutation(n_u)
            for b in range(iters_per_epoch):
                labeled_idx = labeled_cursor.take(cfg.batch_labeled)
                labeled_batch = [split.labeled[i] for i in labeled_idx]
                if n_u > 0:
                    if n_u >= cfg.batch_unlabeled:
                        u_idx = order[b * cfg.batch_unlabeled : (b + 1) * cfg.batch_unlabeled]
                    else:
                        u_idx = order
                    unlabeled_batch = [unlabeled_train[i] for i in u_idx]
                    truths = None if cfg.sup_only else [unlabeled_truths[i] for i in u_idx]
                else:
                    unlabeled_batch, truths = [], None
                state, rec = train_step(state, labeled_batch, unlabeled_batch, cfg, truths)
                rec.epoch = epoch
                records.append(rec)
            rec.val_iou_c, rec.val_oa = evaluate(state.student, split.val)
            writer.write_epoch(records[-iters_per_epoch:])
    except NonFiniteLossError as e:
        e.record.epoch = e.record.iteration // max(1, iters_per_epoch)
        writer.write_epoch([e.record])
        writer.close()
        raise

    # Final evaluation at checkpoint precision; a trailing summary row
    # carries the definitive numbers the eval command will reproduce.
    state.student = quantize_checkpoint_precision(state.student)
    state.teacher = quantize_checkpoint_precision(state.teacher)
    final_iou, final_oa = evaluate(state.student, split.val)
    summary = MetricsRecord(
        iteration=cfg.iter_total,
        epoch=cfg.epochs,
        loss_s=records[-1].loss_s if records else 0.0,
        loss_u=records[-1].loss_u if records else 0.0,
        lam=lambda_weight(cfg.iter_total, cfg.ramp()) if cfg.iter_total else 0.0,
        lr=learning_rate(cfg.iter_total, max(1, cfg.iter_total), cfg.lr0, cfg.lr_min),
        val_iou_c=final_iou,
        val_oa=final_oa,
    )
    records.append(summary)
    writer.write_epoch([summary])
    writer.close()

    if out_dir is not None:
        save_checkpoint(_p(out_dir, "student.ckpt"), state.student)
        save_checkpoint(_p(out_dir, "teacher.ckpt"), state.teacher)
    return records, (final_iou, final_oa)


def evaluate_checkpoint(ckpt_path, cfg: TrainerConfig) -> Tuple[float, float]:
    """Rebuild the seeded validation set and score a stored checkpoint."""
    scene = replace(cfg.scene, seed=cfg.seed)
    split = make_splits(scene, cfg.n_total, cfg.label_ratio, cfg.seed, cfg.n_val)
    params = load_checkpoint(ckpt_path, cfg.np_dtype)
    return evaluate(params, split.val)


class _Cycler:
    """Endless stream of indices: permutation after permutation, one per pass."""

    def __init__(self, seed: int, stream: int, n: int):
        self.seed, self.stream, self.n = seed, stream, n
        self.pass_idx = 0
        self.pos = 0
        self.order = rs.derive_rng(seed, stream, 0).permutation(n) if n else np.empty(0, int)

    def take(self, k: int) -> List[int]:
        out: List[int] = []
        while len(out) < k:
            if self.pos >= self.n:
                self.pass_idx += 1
                self.order = rs.derive_rng(self.seed, self.stream, self.pass_idx).permutation(self.n)
                self.pos = 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


class _LogWriter:
    def __init__(self, out_dir):
        self.enabled = out_dir is not None
        if not self.enabled:
            return
        import os

        os.makedirs(out_dir, exist_ok=True)
        self.metrics = open(_p(out_dir, "metrics.csv"), "w")
        self.metrics.write(METRICS_CSV_HEADER + "\n")
        self.fusion = open(_p(out_dir, "fusion_log.csv"), "w")
        self.fusion.write(FUSION_LOG_HEADER + "\n")
        self.gate = open(_p(out_dir, "gate_log.csv"), "w")
        self.gate.write(GATE_LOG_HEADER + "\n")

    def write_epoch(self, records: Sequence[MetricsRecord]) -> None:
        if not self.enabled:
            return
        for rec in records:
            self.metrics.write(rec.to_csv_row() + "\n")
            for j, d in enumerate(rec.fusion_decisions):
                self.fusion.write(
                    f"{rec.iteration},{j},{d.region.x},{d.region.y},{d.region.w},{d.region.h},"
                    f"{d.donor_kind},{d.donor_index},{_fmt(d.recipient_u)}\n"
                )
            if rec.gate_decision is not None:
                g = rec.gate_decision
                self.gate.write(
                    f"{rec.iteration},{_fmt(g.epsilon_value)},{_fmt(g.tau)},"
                    f"{_fmt(g.rng_draw)},{int(g.updated)}\n"
                )
        self.metrics.flush()
        self.fusion.flush()
        self.gate.flush()

    def close(self) -> None:
        if not self.enabled:
            return
        self.metrics.close()
        self.fusion.close()
        self.gate.close()


def _p(out_dir, name: str) -> str:
    import os

    return os.path.join(str(out_dir), name)
