"""A minimal differentiable single-stage detector.

Teacher and student share one architecture and differ only in the number of
input planes (4 vs 3). The trunk is four [3x3 conv, stride 2, ReLU] blocks
with widths (8, 16, 32, 64); a 1x1 conv head emits, per grid cell, an
objectness logit, four box parameters, and class logits. The embedding used
for distillation is the global average pool of the final trunk feature map.

Everything runs in float64 with hand-written backprop so analytic gradients
can be verified against central finite differences to tight tolerances, and
repeated runs are bit-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Annotation, BoundingBox, Detection, ImagePlane, ImageSample, box_area, clip_box

BACKBONE_WIDTHS = (8, 16, 32, 64)
DOWNSAMPLE = 16  # four stride-2 blocks
CHECKPOINT_MAGIC = b"LUPIDET1"
ROLES = ("teacher", "student", "baseline")

# detection-loss term weights
LAMBDA_OBJ = 1.0
LAMBDA_NOOBJ = 0.5
LAMBDA_BOX = 5.0
LAMBDA_CLS = 1.0


@dataclass(frozen=True)
class DetectorConfig:
    in_planes: int = 3
    num_classes: int = 1
    input_size: int = 64
    backbone_widths: tuple[int, ...] = BACKBONE_WIDTHS
    embed_dim: int = 64

    def __post_init__(self):
        if self.in_planes not in (3, 4):
            raise ValueError(f"in_planes must be 3 or 4, got {self.in_planes}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.input_size % DOWNSAMPLE != 0 or self.input_size < DOWNSAMPLE:
            raise ValueError(f"input_size must be a positive multiple of {DOWNSAMPLE}")
        object.__setattr__(self, "backbone_widths", tuple(self.backbone_widths))
        if self.embed_dim != self.backbone_widths[-1]:
            raise ValueError("embed_dim must equal the final backbone width")

    @property
    def grid(self) -> int:
        return self.input_size // DOWNSAMPLE

    @property
    def head_channels(self) -> int:
        # objectness + (tx, ty, tw, th) + class logits
        return 5 + self.num_classes

    def to_dict(self) -> dict:
        return {
            "in_planes": self.in_planes,
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "backbone_widths": list(self.backbone_widths),
            "embed_dim": self.embed_dim,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DetectorConfig":
        return cls(
            in_planes=int(doc["in_planes"]),
            num_classes=int(doc["num_classes"]),
            input_size=int(doc["input_size"]),
            backbone_widths=tuple(doc["backbone_widths"]),
            embed_dim=int(doc["embed_dim"]),
        )


@dataclass
class DetectorModel:
    config: DetectorConfig
    params: dict[str, np.ndarray]
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")


@dataclass(frozen=True)
class Embedding:
    """Final-backbone feature representation vector."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError(f"embedding must be 1-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("embedding contains non-finite values")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class RawPrediction:
    """Dense head output, shape (5 + num_classes, S, S)."""

    values: np.ndarray
    num_classes: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != 5 + self.num_classes or v.shape[1] != v.shape[2]:
            raise ValueError(f"raw prediction has unexpected shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("raw prediction contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def grid(self) -> int:
        return self.values.shape[1]


def param_names(config: DetectorConfig) -> list[str]:
    names = []
    for i in range(len(config.backbone_widths)):
        names += [f"conv{i + 1}.w", f"conv{i + 1}.b"]
    return names + ["head.w", "head.b"]


def param_shapes(config: DetectorConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    in_ch = config.in_planes
    for i, out_ch in enumerate(config.backbone_widths):
        shapes[f"conv{i + 1}.w"] = (out_ch, in_ch, 3, 3)
        shapes[f"conv{i + 1}.b"] = (out_ch,)
        in_ch = out_ch
    shapes["head.w"] = (config.head_channels, config.embed_dim)
    shapes["head.b"] = (config.head_channels,)
    return shapes


def init_model(config: DetectorConfig, role: str, seed: int) -> DetectorModel:
    """Kaiming-uniform (fan-in) conv kernels, zero biases, objectness bias -2.

    The negative objectness prior keeps the dominant-negative grid calm at
    the start of training. Parameters are drawn in a fixed name order from a
    single seeded generator, so (config, seed) fully determines the model.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    params["head.b"][0] = -2.0
    return DetectorModel(config=config, params=params, role=role)


def parameter_count(model: DetectorModel) -> int:
    return sum(int(p.size) for p in model.params.values())


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C*k*k, Ho*Wo) patch matrix."""
    b, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sb, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, k, k, ho, wo),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return windows.reshape(b, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add adjoint of _im2col; deterministic accumulation order."""
    b, c, h, w = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    d6 = dcols.reshape(b, c, k, k, ho, wo)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + w]


def _forward_array(config: DetectorConfig, params: dict, x: np.ndarray, keep_cache: bool = False):
    """Run the trunk and head on a (B, P, H, H) batch.

    Returns (head (B, K, S, S), embedding (B, D), cache). The cache holds
    what the backward pass needs: per-layer input shapes, patch matrices,
    pre-activations, and the final feature map.
    """
    cache = {"shapes": [], "cols": [], "pre": []} if keep_cache else None
    h = x
    for i in range(len(config.backbone_widths)):
        w = params[f"conv{i + 1}.w"]
        b = params[f"conv{i + 1}.b"]
        cols = _im2col(h, 3, 2, 1)
        pre = np.matmul(w.reshape(w.shape[0], -1), cols) + b[:, None]
        bsz = h.shape[0]
        side = (h.shape[2] + 2 - 3) // 2 + 1
        pre = pre.reshape(bsz, w.shape[0], side, side)
        if keep_cache:
            cache["shapes"].append(h.shape)
            cache["cols"].append(cols)
            cache["pre"].append(pre)
        h = np.maximum(pre, 0.0)
    feat = h  # (B, D, S, S)
    bsz, dim, s, _ = feat.shape
    emb = feat.mean(axis=(2, 3))
    head = np.matmul(params["head.w"], feat.reshape(bsz, dim, s * s)) + params["head.b"][:, None]
    head = head.reshape(bsz, config.head_channels, s, s)
    if keep_cache:
        cache["feat"] = feat
    return head, emb, cache


def _backward_array(
    config: DetectorConfig,
    params: dict,
    cache: dict,
    d_head: np.ndarray,
    d_emb: np.ndarray | None,
) -> dict[str, np.ndarray]:
    """Backprop d(loss)/d(head) and d(loss)/d(embedding) into parameter grads."""
    feat = cache["feat"]
    bsz, dim, s, _ = feat.shape
    grads: dict[str, np.ndarray] = {}
    dhead_mat = d_head.reshape(bsz, config.head_channels, s * s)
    feat_mat = feat.reshape(bsz, dim, s * s)
    grads["head.w"] = np.matmul(dhead_mat, feat_mat.transpose(0, 2, 1)).sum(axis=0)
    grads["head.b"] = dhead_mat.sum(axis=(0, 2))
    dfeat = np.matmul(params["head.w"].T, dhead_mat).reshape(bsz, dim, s, s)
    if d_emb is not None:
        dfeat = dfeat + d_emb[:, :, None, None] / (s * s)

    dh = dfeat
    for i in reversed(range(len(config.backbone_widths))):
        w = params[f"conv{i + 1}.w"]
        pre = cache["pre"][i]
        dpre = dh * (pre > 0.0)
        b2, cout, ho, wo = dpre.shape
        dpre_mat = dpre.reshape(b2, cout, ho * wo)
        cols = cache["cols"][i]
        grads[f"conv{i + 1}.w"] = (
            np.matmul(dpre_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        )
        grads[f"conv{i + 1}.b"] = dpre_mat.sum(axis=(0, 2))
        if i > 0:
            dcols = np.matmul(w.reshape(cout, -1).T, dpre_mat)
            dh = _col2im(dcols, cache["shapes"][i], 3, 2, 1)
    return grads


def planes_for_model(sample: ImageSample, in_planes: int) -> list[ImagePlane]:
    """RGB planes, plus the privileged plane for 4-plane (teacher) models."""
    if in_planes == 3:
        return list(sample.rgb)
    if sample.privileged is None:
        raise ValueError(f"sample {sample.id!r} has no privileged plane but model expects 4")
    return list(sample.rgb) + [sample.privileged]


def _stack_planes(config: DetectorConfig, planes: list[ImagePlane]) -> np.ndarray:
    if len(planes) != config.in_planes:
        raise ValueError(f"model expects {config.in_planes} planes, got {len(planes)}")
    for p in planes:
        if p.width != config.input_size or p.height != config.input_size:
            raise ValueError(
                f"plane is {p.width}x{p.height}, model expects "
                f"{config.input_size}x{config.input_size}"
            )
    return np.stack([p.values for p in planes])


def forward(model: DetectorModel, planes: list[ImagePlane]) -> tuple[RawPrediction, Embedding]:
    """Single-sample forward pass; deterministic in (params, input)."""
    x = _stack_planes(model.config, planes)[None]
    head, emb, _ = _forward_array(model.config, model.params, x)
    return (
        RawPrediction(values=head[0], num_classes=model.config.num_classes),
        Embedding(values=emb[0]),
    )


def backbone_embedding(model: DetectorModel, planes: list[ImagePlane]) -> Embedding:
    """The distillation vector; identical to forward(...)[1]."""
    return forward(model, planes)[1]


def predict_samples(model: DetectorModel, samples, chunk: int = 64) -> list[RawPrediction]:
    """Batched forward over samples; returns one RawPrediction per sample."""
    out: list[RawPrediction] = []
    for start in range(0, len(samples), chunk):
        batch = samples[start:start + chunk]
        x = np.stack([
            _stack_planes(model.config, planes_for_model(s, model.config.in_planes))
            for s in batch
        ])
        head, _, _ = _forward_array(model.config, model.params, x)
        out.extend(
            RawPrediction(values=head[i], num_classes=model.config.num_classes)
            for i in range(len(batch))
        )
    return out


# ---------------------------------------------------------------------------
# Target assignment, loss, decoding
# ---------------------------------------------------------------------------

@dataclass
class CellTargets:
    """Per-cell training targets for one sample."""

    obj: np.ndarray  # (S, S) in {0, 1}
    box: np.ndarray  # (4, S, S): tx, ty in [0, 1); tw, th in (0, 1]
    cls: np.ndarray  # (S, S) class id at positive cells, -1 elsewhere


def assign_targets(annotations, config: DetectorConfig) -> CellTargets:
    """One predictor per cell: the cell containing a box center goes positive.

    When several boxes land in one cell the largest area wins; ties fall to
    the lower class id, then to annotation order.
    """
    s = config.grid
    cell = config.input_size / s
    obj = np.zeros((s, s), dtype=np.float64)
    box = np.zeros((4, s, s), dtype=np.float64)
    cls = np.full((s, s), -1, dtype=np.int64)
    best_area = np.zeros((s, s), dtype=np.float64)
    for ann in annotations:
        cx, cy = ann.box.center
        col = min(int(cx // cell), s - 1)
        row = min(int(cy // cell), s - 1)
        area = box_area(ann.box)
        if obj[row, col] == 1.0:
            if area < best_area[row, col]:
                continue
            if area == best_area[row, col] and ann.class_id >= cls[row, col]:
                continue
        obj[row, col] = 1.0
        best_area[row, col] = area
        cls[row, col] = ann.class_id
        box[0, row, col] = cx / cell - col
        box[1, row, col] = cy / cell - row
        box[2, row, col] = ann.box.width / config.input_size
        box[3, row, col] = ann.box.height / config.input_size
    return CellTargets(obj=obj, box=box, cls=cls)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + e^z), stable on both tails
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def detection_loss_and_grad(
    values: np.ndarray,
    targets: CellTargets,
) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the raw head values for one sample.

    Terms (each mean-reduced over its contributing cells):
      0.5 * BCE(objectness, 0) over negative cells
      1.0 * BCE(objectness, 1) over positive cells
      5.0 * smooth-L1(sigmoid(box params), targets) over positive cells
      1.0 * softmax cross-entropy over positive cells
    """
    k, s, _ = values.shape
    num_classes = k - 5
    pos = targets.obj == 1.0
    neg = ~pos
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    grad = np.zeros_like(values)
    loss = 0.0

    zobj = values[0]
    sobj = _sigmoid(zobj)
    if n_neg:
        # BCE(sigmoid(z), 0) = softplus(z)
        loss += LAMBDA_NOOBJ * float(_softplus(zobj[neg]).sum()) / n_neg
        grad[0][neg] = LAMBDA_NOOBJ * sobj[neg] / n_neg
    if n_pos:
        # BCE(sigmoid(z), 1) = softplus(z) - z
        loss += LAMBDA_OBJ * float((_softplus(zobj[pos]) - zobj[pos]).sum()) / n_pos
        grad[0][pos] = LAMBDA_OBJ * (sobj[pos] - 1.0) / n_pos

        zbox = values[1:5][:, pos]  # (4, n_pos)
        u = _sigmoid(zbox)
        e = u - targets.box[:, pos]
        small = np.abs(e) < 1.0
        huber = np.where(small, 0.5 * e * e, np.abs(e) - 0.5)
        loss += LAMBDA_BOX * float(huber.sum()) / n_pos
        dhuber = np.where(small, e, np.sign(e))
        gbox = np.zeros_like(values[1:5])
        gbox[:, pos] = LAMBDA_BOX * dhuber * u * (1.0 - u) / n_pos
        grad[1:5] = gbox

        zcls = values[5:][:, pos]  # (C, n_pos)
        zmax = zcls.max(axis=0)
        shifted = zcls - zmax
        lse = zmax + np.log(np.exp(shifted).sum(axis=0))
        tgt = targets.cls[pos]
        picked = zcls[tgt, np.arange(n_pos)]
        loss += LAMBDA_CLS * float((lse - picked).sum()) / n_pos
        soft = np.exp(shifted) / np.exp(shifted).sum(axis=0)
        soft[tgt, np.arange(n_pos)] -= 1.0
        gcls = np.zeros_like(values[5:])
        gcls[:, pos] = LAMBDA_CLS * soft / n_pos
        grad[5:] = gcls

    return loss, grad


def detection_loss(pred: RawPrediction, targets: CellTargets) -> float:
    """Scalar detection loss for one prediction; always non-negative."""
    if pred.values.shape[1] != targets.obj.shape[0]:
        raise ValueError("prediction and target grids disagree")
    loss, _ = detection_loss_and_grad(pred.values, targets)
    return loss


def decode(pred: RawPrediction, config: DetectorConfig, score_threshold: float) -> list[Detection]:
    """Map dense head output to scored detections.

    Per cell: score = sigmoid(objectness) * max softmax class probability;
    the box center is (cell origin + sigmoid(tx, ty)) * cell size and the
    sides are sigmoid(tw, th) * input size. Detections are emitted when the
    score clears the threshold and the box is still valid after clipping to
    the image. Cell order is row-major.
    """
    if not (0.0 <= score_threshold <= 1.0):
        raise ValueError(f"score_threshold must lie in [0, 1], got {score_threshold}")
    v = pred.values
    s = pred.grid
    h = config.input_size
    cell = h / s
    obj_p = _sigmoid(v[0])
    zcls = v[5:]
    zmax = zcls.max(axis=0, keepdims=True)
    ez = np.exp(zcls - zmax)
    probs = ez / ez.sum(axis=0, keepdims=True)
    best_cls = probs.argmax(axis=0)
    best_p = probs.max(axis=0)
    score = obj_p * best_p
    sbox = _sigmoid(v[1:5])
    image = BoundingBox(0.0, 0.0, float(h), float(h))

    out: list[Detection] = []
    for row in range(s):
        for col in range(s):
            sc = float(score[row, col])
            if sc < score_threshold:
                continue
            cx = (col + sbox[0, row, col]) * cell
            cy = (row + sbox[1, row, col]) * cell
            bw = sbox[2, row, col] * h
            bh = sbox[3, row, col] * h
            try:
                raw = BoundingBox(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
            except ValueError:
                continue
            clipped = clip_box(raw, image)
            if clipped is None:
                continue
            out.append(Detection(box=clipped, class_id=int(best_cls[row, col]), score=sc))
    return out


# ---------------------------------------------------------------------------
# Checkpoint IO
# ---------------------------------------------------------------------------

def save_model(model: DetectorModel, path: Path | str, meta: dict | None = None) -> None:
    """Write magic, u32-LE length-prefixed JSON header, then float32-LE blobs.

    Blobs follow header order; parameters are cast to float32 on disk.
    """
    names = param_names(model.config)
    header = {
        "config": model.config.to_dict(),
        "role": model.role,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(hb)), hb]
    for n in names:
        chunks.append(model.params[n].astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_model(path: Path | str) -> DetectorModel:
    """Read a checkpoint; parameters come back as float64 copies of the blobs."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a detector checkpoint")
    (hlen,) = struct.unpack_from("<I", data, len(CHECKPOINT_MAGIC))
    off = len(CHECKPOINT_MAGIC) + 4
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    config = DetectorConfig.from_dict(header["config"])
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        blob = np.frombuffer(data, dtype="<f4", count=n, offset=off)
        params[entry["name"]] = blob.astype(np.float64).reshape(shape)
        off += 4 * n
    model = DetectorModel(config=config, params=params, role=header["role"])
    return model


def load_checkpoint_meta(path: Path | str) -> dict:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a detector checkpoint")
    (hlen,) = struct.unpack_from("<I", data, len(CHECKPOINT_MAGIC))
    off = len(CHECKPOINT_MAGIC) + 4
    return json.loads(data[off:off + hlen].decode("utf-8"))
