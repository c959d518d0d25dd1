"""Teacher and student training: combined loss, Adam, early stopping.

The student objective mixes the detection loss with a cosine-distance pull
toward the frozen teacher's embedding:

    loss = (1 - alpha) * detection_loss + alpha * mean cosine_distance

Gradients flow only through the student branch of the distance; teacher
embeddings are constants computed once per run. The baseline is exactly the
alpha = 0 case of the same code path, where the teacher is never evaluated.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset
from .detector import (
    CellTargets,
    DetectorConfig,
    DetectorModel,
    Embedding,
    _backward_array,
    _forward_array,
    assign_targets,
    detection_loss_and_grad,
    init_model,
    planes_for_model,
    _stack_planes,
)
from .ingest import DatasetError
from .metrics import EvalConfig, evaluate_detector

NORM_FLOOR = 1e-12  # below this, cosine distance degrades to maximal ignorance


class TrainingError(Exception):
    """Raised when optimization itself fails (e.g. non-finite loss)."""


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.0
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    max_epochs: int = 100
    patience: int = 8
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs, and batch_size must be >= 1")


# ---------------------------------------------------------------------------
# Loss pieces
# ---------------------------------------------------------------------------

def _as_vector(u) -> np.ndarray:
    if isinstance(u, Embedding):
        return u.values
    return np.asarray(u, dtype=np.float64)


def cosine_distance(u, v) -> float:
    """1 - cosine similarity, in [0, 2].

    When either norm is below 1e-12 the distance is defined as 1.0 (maximal
    ignorance) so nothing divides by ~zero; the gradient there is zero.
    """
    uv = _as_vector(u)
    vv = _as_vector(v)
    if uv.shape != vv.shape:
        raise ValueError(f"embedding lengths differ: {uv.shape} vs {vv.shape}")
    nu = float(np.linalg.norm(uv))
    nv = float(np.linalg.norm(vv))
    if nu < NORM_FLOOR or nv < NORM_FLOOR:
        return 1.0
    return 1.0 - float(uv @ vv) / (nu * nv)


def cosine_distance_grad(u, v) -> tuple[float, np.ndarray]:
    """Distance and its gradient with respect to the first argument."""
    uv = _as_vector(u)
    vv = _as_vector(v)
    if uv.shape != vv.shape:
        raise ValueError(f"embedding lengths differ: {uv.shape} vs {vv.shape}")
    nu = float(np.linalg.norm(uv))
    nv = float(np.linalg.norm(vv))
    if nu < NORM_FLOOR or nv < NORM_FLOOR:
        return 1.0, np.zeros_like(uv)
    dot = float(uv @ vv)
    dist = 1.0 - dot / (nu * nv)
    grad = -(vv / (nu * nv) - dot * uv / (nu ** 3 * nv))
    return dist, grad


def student_loss(det_loss: float, distance: float, alpha: float) -> float:
    """(1 - alpha) * detection loss + alpha * distillation distance."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * det_loss + alpha * distance


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={n: np.zeros_like(p) for n, p in params.items()},
        v={n: np.zeros_like(p) for n, p in params.items()},
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: DistillConfig,
) -> None:
    """One bias-corrected Adam update, in place. No weight decay by default."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.adam_beta1 ** t
    c2 = 1.0 - cfg.adam_beta2 ** t
    for name in sorted(params):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= cfg.adam_beta1
        m += (1.0 - cfg.adam_beta1) * g
        v *= cfg.adam_beta2
        v += (1.0 - cfg.adam_beta2) * (g * g)
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# Training log and early stopping
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    det_term: float
    distill_term: float
    val_map50: float
    epochs_since_best: int


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_map50(self) -> float:
        if self.best_epoch < 1:
            return float("nan")
        return self.records[self.best_epoch - 1].val_map50

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,det_term,distill_term,val_map50,epochs_since_best"]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.train_loss!r},{r.det_term!r},{r.distill_term!r},"
                f"{r.val_map50!r},{r.epochs_since_best}"
            )
        return "\n".join(lines) + "\n"


def early_stop_check(log: TrainLog, patience: int) -> bool:
    """True means stop: the latest epoch is `patience` epochs past the best.

    Improvement is strict; epochs that merely tie the best count as stale.
    """
    if not log.records:
        raise ValueError("early_stop_check requires a non-empty log")
    return log.records[-1].epochs_since_best >= patience


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _infer_input_size(ds: Dataset) -> int:
    sizes = {(s.width, s.height) for s in ds.samples}
    if len(sizes) != 1:
        raise DatasetError(f"training requires uniform sample dimensions, found {sorted(sizes)}")
    (w, h), = sizes
    if w != h:
        raise DatasetError(f"training requires square samples, found {w}x{h}")
    return w


def _teacher_embeddings(teacher: DetectorModel, xs: list[np.ndarray], chunk: int = 64) -> np.ndarray:
    embs = []
    for start in range(0, len(xs), chunk):
        x = np.stack(xs[start:start + chunk])
        _, emb, _ = _forward_array(teacher.config, teacher.params, x)
        embs.append(emb)
    return np.concatenate(embs, axis=0)


def _run_training(
    model: DetectorModel,
    train: Dataset,
    val: Dataset,
    cfg: DistillConfig,
    eval_cfg: EvalConfig,
    teacher_embs: np.ndarray | None,
    shuffle_rng: np.random.Generator,
) -> tuple[DetectorModel, TrainLog]:
    alpha = cfg.alpha
    config = model.config
    xs = [
        _stack_planes(config, planes_for_model(s, config.in_planes))
        for s in train.samples
    ]
    targets: list[CellTargets] = [assign_targets(s.annotations, config) for s in train.samples]
    n = len(xs)
    state = init_adam(model.params)
    log = TrainLog()
    best_map = -np.inf
    best_params = {k: p.copy() for k, p in model.params.items()}
    since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        perm = shuffle_rng.permutation(n)
        loss_sum = det_sum = dist_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            bsz = len(idx)
            x = np.stack([xs[i] for i in idx])
            head, emb, cache = _forward_array(config, model.params, x, keep_cache=True)

            d_head = np.zeros_like(head)
            batch_det = 0.0
            for j, i in enumerate(idx):
                det_loss, det_grad = detection_loss_and_grad(head[j], targets[i])
                batch_det += det_loss
                d_head[j] = det_grad * ((1.0 - alpha) / bsz)
            batch_det /= bsz

            batch_dist = 0.0
            d_emb = None
            if alpha > 0.0 and teacher_embs is not None:
                d_emb = np.zeros_like(emb)
                for j, i in enumerate(idx):
                    dist, dgrad = cosine_distance_grad(emb[j], teacher_embs[i])
                    batch_dist += dist
                    d_emb[j] = dgrad * (alpha / bsz)
                batch_dist /= bsz

            batch_loss = student_loss(batch_det, batch_dist, alpha)
            if not np.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads = _backward_array(config, model.params, cache, d_head, d_emb)
            adam_step(model.params, grads, state, cfg)

            loss_sum += batch_loss * bsz
            det_sum += batch_det * bsz
            dist_sum += batch_dist * bsz

        report, _ = evaluate_detector(model, val, eval_cfg)
        val_map = report.map50
        if val_map > best_map:
            best_map = val_map
            since_best = 0
            log.best_epoch = epoch
            best_params = {k: p.copy() for k, p in model.params.items()}
        else:
            since_best += 1
        log.records.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / n,
            det_term=det_sum / n,
            distill_term=dist_sum / n,
            val_map50=val_map,
            epochs_since_best=since_best,
        ))
        if early_stop_check(log, cfg.patience):
            break

    model.params = best_params
    return model, log


def train_teacher(
    train: Dataset,
    val: Dataset,
    cfg: DistillConfig,
    eval_cfg: EvalConfig = EvalConfig(),
) -> tuple[DetectorModel, TrainLog]:
    """Train the 4-plane teacher on detection loss alone.

    Every train and val sample must already carry its privileged mask plane;
    the teacher consumes ground-truth masks during validation too.
    """
    for ds in (train, val):
        for s in ds.samples:
            if s.privileged is None:
                raise DatasetError(f"sample {s.id!r} in {ds.split} has no privileged plane")
    config = DetectorConfig(
        in_planes=4,
        num_classes=train.num_classes,
        input_size=_infer_input_size(train),
    )
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss = ss.spawn(2)
    model = init_model(config, "teacher", init_ss)
    # detection loss only; alpha plays no role for the teacher
    teacher_cfg = DistillConfig(
        alpha=0.0, lr=cfg.lr, adam_beta1=cfg.adam_beta1, adam_beta2=cfg.adam_beta2,
        adam_eps=cfg.adam_eps, weight_decay=cfg.weight_decay, max_epochs=cfg.max_epochs,
        patience=cfg.patience, batch_size=cfg.batch_size, seed=cfg.seed,
    )
    return _run_training(
        model, train, val, teacher_cfg, eval_cfg,
        teacher_embs=None, shuffle_rng=np.random.default_rng(shuffle_ss),
    )


def train_student(
    train: Dataset,
    val: Dataset,
    teacher: DetectorModel | None,
    cfg: DistillConfig,
    eval_cfg: EvalConfig = EvalConfig(),
) -> tuple[DetectorModel, TrainLog]:
    """Train the 3-plane student with the combined loss.

    At alpha = 0 the teacher is never evaluated (it may be None): the run is
    the baseline, bit-identical to a teacher-free run with the same seed.
    For alpha > 0 the frozen teacher's embeddings are computed once from
    (rgb, privileged) train inputs and treated as constants.
    """
    config = DetectorConfig(
        in_planes=3,
        num_classes=train.num_classes,
        input_size=_infer_input_size(train),
    )
    teacher_embs = None
    if cfg.alpha > 0.0:
        if teacher is None:
            raise ValueError("alpha > 0 requires a teacher model")
        if teacher.config.in_planes != 4:
            raise ValueError("teacher must be a 4-plane model")
        if teacher.config.embed_dim != config.embed_dim:
            raise ValueError(
                f"teacher embed_dim {teacher.config.embed_dim} != student {config.embed_dim}"
            )
        if teacher.config.input_size != config.input_size:
            raise ValueError("teacher and student input sizes differ")
        teacher_xs = []
        for s in train.samples:
            if s.privileged is None:
                raise DatasetError(f"train sample {s.id!r} has no privileged plane")
            teacher_xs.append(_stack_planes(teacher.config, planes_for_model(s, 4)))
        teacher_embs = _teacher_embeddings(teacher, teacher_xs)

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss = ss.spawn(2)
    model = init_model(config, "student", init_ss)
    return _run_training(
        model, train, val, cfg, eval_cfg,
        teacher_embs=teacher_embs, shuffle_rng=np.random.default_rng(shuffle_ss),
    )
