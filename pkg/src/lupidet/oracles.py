"""Brute-force reference implementations, used only by the test suite.

These deliberately share nothing with the production paths beyond the core
geometry types, and nothing in the CLI can reach them: they exist to check
the fast implementations, not to run the pipeline.
"""

from __future__ import annotations

import numpy as np

from .core import Annotation, Detection, box_area, iou

MAX_NMS_BOXES = 15
MAX_AP_DETECTIONS = 50


def oracle_nms(dets: list[Detection], threshold: float) -> list[Detection]:
    """Greedy class-wise suppression by a literal O(n^2) double loop."""
    if len(dets) > MAX_NMS_BOXES:
        raise ValueError(f"oracle_nms is capped at {MAX_NMS_BOXES} boxes")
    order = sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].score, -box_area(dets[i].box), i),
    )
    kept: list[int] = []
    for i in order:
        suppressed = False
        for j in kept:
            if dets[j].class_id != dets[i].class_id:
                continue
            if iou(dets[j].box, dets[i].box) >= threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return [dets[i] for i in kept]


def oracle_ap(matches: list[bool], num_gt: int) -> float:
    """101-point AP by direct table lookup over the PR staircase."""
    if len(matches) > MAX_AP_DETECTIONS:
        raise ValueError(f"oracle_ap is capped at {MAX_AP_DETECTIONS} detections")
    if num_gt <= 0:
        return 0.0
    points = []  # (recall, precision) after each detection
    tp = fp = 0
    for m in matches:
        if m:
            tp += 1
        else:
            fp += 1
        points.append((tp / num_gt, tp / (tp + fp)))
    total = 0.0
    for i in range(101):
        r = i / 100
        best = 0.0
        for recall, precision in points:
            if recall >= r and precision > best:
                best = precision
        total += best
    return total / 101


def finite_diff_grad(loss_fn, params: dict[str, np.ndarray], step: float) -> dict[str, np.ndarray]:
    """Central finite differences of loss_fn(params) per scalar parameter.

    Perturbs in place and restores; intended for small parameter sets.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    grads: dict[str, np.ndarray] = {}
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_fn(params)
            flat[i] = orig - step
            f_minus = loss_fn(params)
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * step)
        grads[name] = g.reshape(p.shape)
    return grads


def finite_diff_grad_at(
    loss_fn,
    params: dict[str, np.ndarray],
    name: str,
    flat_indices,
    step: float,
) -> np.ndarray:
    """Central differences at selected flat coordinates of one tensor."""
    if step <= 0:
        raise ValueError("step must be positive")
    flat = params[name].reshape(-1)
    out = np.zeros(len(flat_indices), dtype=np.float64)
    for j, i in enumerate(flat_indices):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = loss_fn(params)
        flat[i] = orig - step
        f_minus = loss_fn(params)
        flat[i] = orig
        out[j] = (f_plus - f_minus) / (2.0 * step)
    return out
