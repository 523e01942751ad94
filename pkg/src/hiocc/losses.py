"""Training losses with analytic gradients.

The affinity losses score scene-level precision, recall, and specificity
per class instead of per voxel.  For class c with predicted probabilities
x_i and target fractions p_i (positives m_i = [p_i > 0]):

    P_c = log(sum_i x_i m_i / sum_i x_i)            (precision)
    R_c = -|log(sum_i x_i m_i / sum_i p_i)|         (recall)
    S_c = log(sum_i (1 - x_i)(1 - m_i) / sum_i (1 - m_i))   (specificity)

and the loss is -(1/N) * sum over classes of the defined terms, where N
counts classes contributing at least one term.  A term is undefined (and
skipped) when its denominator vanishes: P needs a positive prediction
mass, P and R need the class present in the target, S needs at least one
negative voxel.  Log arguments are clamped below at eps = 1e-7; clamped
terms contribute zero gradient.

All losses return the objective value together with its gradient with
respect to the prediction argument, averaged the same way the value is.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mini_nn import log_softmax, softmax, softmax_vjp
from .voxel_grid import (
    FREE_CLASS,
    ClassHistogramGrid,
    SemanticGrid,
    build_histogram_pyramid,
    plurality_labels,
    subdivision_mask,
)

EPS = 1e-7


@dataclass
class LossResult:
    """A scalar loss value, its gradient, and how many terms defined it."""

    value: float
    grad: np.ndarray
    defined_terms: int


@dataclass
class LossWeights:
    """Coefficients of the combined objective.

    lambda1 / lambda2 scale the coarse cross-entropy and coarse geometric
    affinity terms; the fine branch and the split head enter unscaled.
    """

    lambda1: float = 1.0
    lambda2: float = 0.3
    ce_class_weights: np.ndarray | None = None
    hard_low_targets: bool = False

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss coefficients must be nonnegative")
        if self.ce_class_weights is not None:
            self.ce_class_weights = np.asarray(self.ce_class_weights, np.float64)
            if self.ce_class_weights.min(initial=0.0) < 0:
                raise ValueError("class weights must be nonnegative")


def ce_class_weights(frequencies: np.ndarray, offset: float = 1.02) -> np.ndarray:
    """Inverse-log-frequency class weights: w_c = 1 / log(offset + f_c)."""
    frequencies = np.asarray(frequencies, dtype=np.float64)
    if frequencies.min(initial=0.0) < 0:
        raise ValueError("frequencies must be nonnegative")
    return 1.0 / np.log(offset + frequencies)


def _check_probs(
    pred: np.ndarray, target: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim != 2:
        raise ValueError(f"pred must be [n, C], got shape {pred.shape}")
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.min(initial=0.0) < 0:
        raise ValueError("negative predicted probability")
    if target.min(initial=0.0) < 0:
        raise ValueError("negative target fraction")
    return pred, target


def _resolve_defined(defined: np.ndarray | None, n: int) -> np.ndarray:
    if defined is None:
        return np.ones(n, dtype=bool)
    defined = np.asarray(defined, dtype=bool)
    if defined.shape != (n,):
        raise ValueError(f"defined mask must be [{n}], got {defined.shape}")
    return defined


def _scal_channel(
    x: np.ndarray, p: np.ndarray, eps: float
) -> tuple[float, np.ndarray, int]:
    """Sum of the defined P/R/S terms of one class channel and its gradient.

    x, p: [m] predictions and target fractions over defined voxels.
    Returns (term_sum, d(term_sum)/dx, num_terms).
    """
    m = p > 0.0
    grad = np.zeros_like(x)
    total = 0.0
    terms = 0
    a = float(x[m].sum())
    if m.any():
        b = float(x.sum())
        if b > 0.0:  # precision
            ratio = a / b
            if ratio > eps:
                total += np.log(ratio)
                grad += np.where(m, 1.0 / a, 0.0) - 1.0 / b
            else:
                total += np.log(eps)
            terms += 1
        g = float(p.sum())  # recall; g > 0 iff the class is present
        ratio = a / g
        if ratio > eps:
            la = np.log(ratio)
            total += -abs(la)
            sign = np.sign(la)
            if sign != 0.0:
                grad += np.where(m, -sign / a, 0.0)
        else:
            total += np.log(eps)  # -|log eps| with log eps < 0
        terms += 1
    neg = ~m
    nneg = int(neg.sum())
    if nneg > 0:  # specificity
        abar = float((1.0 - x[neg]).sum())
        ratio = abar / nneg
        if ratio > eps:
            total += np.log(ratio)
            grad += np.where(neg, -1.0 / abar, 0.0)
        else:
            total += np.log(eps)
        terms += 1
    return total, grad, terms


def multiclass_scal(
    pred: np.ndarray,
    target_fracs: np.ndarray,
    mode: str,
    defined: np.ndarray | None = None,
    include_free: bool = True,
    eps: float = EPS,
) -> LossResult:
    """Scene-level affinity loss against per-voxel class fractions.

    Args:
        pred: predicted class probabilities [n, C]; rows are expected to
            be distributions but only nonnegativity is enforced.
        target_fracs: target class fractions [n, C]; a class is treated
            as present at a voxel iff its fraction is positive.
        mode: "geo" scores a single occupancy channel (1 - free); "sem"
            scores every class channel.
        defined: optional [n] mask; excluded voxels contribute nothing.
        include_free: in "sem" mode, whether the free channel is scored
            alongside the semantic classes.

    Returns:
        LossResult with grad of shape [n, C]; defined_terms counts the
        (class, term) pairs that entered the average.
    """
    pred, target_fracs = _check_probs(pred, target_fracs)
    if mode not in ("geo", "sem"):
        raise ValueError(f"mode must be 'geo' or 'sem', got {mode!r}")
    n, c = pred.shape
    defined = _resolve_defined(defined, n)
    xd = pred[defined]
    pd = target_fracs[defined]
    grad = np.zeros_like(pred)
    if mode == "geo":
        channels = [(1.0 - xd[:, FREE_CLASS], 1.0 - pd[:, FREE_CLASS], FREE_CLASS)]
    else:
        ids = range(c) if include_free else range(1, c)
        channels = [(xd[:, j], pd[:, j], j) for j in ids]

    total = 0.0
    n_terms = 0
    n_classes = 0
    for x, p, col in channels:
        t, g, k = _scal_channel(np.ascontiguousarray(x), p, eps)
        if k == 0:
            continue
        n_classes += 1
        n_terms += k
        total += t
        if mode == "geo":
            grad[defined, col] -= g  # d(1 - x_free)/dx_free = -1
        else:
            grad[defined, col] += g
    if n_classes == 0:
        raise ValueError("no affinity term is defined on this input")
    scale = -1.0 / n_classes
    return LossResult(value=scale * total, grad=scale * grad, defined_terms=n_terms)


def scal_onehot(
    pred: np.ndarray,
    target_onehot: np.ndarray,
    mode: str,
    valid: np.ndarray | None = None,
    include_free: bool = True,
    eps: float = EPS,
) -> LossResult:
    """Affinity loss for hard one-hot targets.

    Kept as its own direct evaluation (explicit per-class masses rather
    than the fraction-channel kernel) so it can cross-check the general
    form, which must agree with it exactly on one-hot inputs.
    """
    pred, target_onehot = _check_probs(pred, target_onehot)
    if mode not in ("geo", "sem"):
        raise ValueError(f"mode must be 'geo' or 'sem', got {mode!r}")
    n, c = pred.shape
    valid = _resolve_defined(valid, n)
    rows = target_onehot[valid]
    if rows.size:
        if not np.isin(rows, (0.0, 1.0)).all() or (rows.sum(axis=1) != 1.0).any():
            raise ValueError("target rows must be exactly one-hot")
    labels = np.argmax(target_onehot, axis=1)

    grad = np.zeros_like(pred)
    total = 0.0
    n_terms = 0
    n_classes = 0
    vi = np.nonzero(valid)[0]

    # Build (positive mask over valid voxels, prediction, gradient column,
    # gradient sign) per scored channel.
    def channel_views():
        if mode == "geo":
            pos = labels[vi] != FREE_CLASS
            x = 1.0 - pred[vi, FREE_CLASS]
            yield pos, x, FREE_CLASS, -1.0
        else:
            start = 0 if include_free else 1
            for cls in range(start, c):
                pos = labels[vi] == cls
                x = pred[vi, cls]
                yield pos, x, cls, 1.0

    for pos, x, col, sign in channel_views():
        g = np.zeros_like(x)
        t = 0.0
        k = 0
        npos = int(pos.sum())
        a = float(x[pos].sum())
        if npos > 0:
            b = float(x.sum())
            if b > 0.0:  # precision
                ratio = a / b
                if ratio > eps:
                    t += np.log(ratio)
                    g[pos] += 1.0 / a
                    g -= 1.0 / b
                else:
                    t += np.log(eps)
                k += 1
            ratio = a / npos  # recall: one-hot target mass equals the count
            if ratio > eps:
                la = np.log(ratio)
                t -= abs(la)
                if la > 0:
                    g[pos] -= 1.0 / a
                elif la < 0:
                    g[pos] += 1.0 / a
            else:
                t += np.log(eps)
            k += 1
        nneg = int((~pos).sum())
        if nneg > 0:  # specificity
            abar = float((1.0 - x[~pos]).sum())
            ratio = abar / nneg
            if ratio > eps:
                t += np.log(ratio)
                g[~pos] -= 1.0 / abar
            else:
                t += np.log(eps)
            k += 1
        if k == 0:
            continue
        n_classes += 1
        n_terms += k
        total += t
        grad[vi, col] += sign * g
    if n_classes == 0:
        raise ValueError("no affinity term is defined on this input")
    scale = -1.0 / n_classes
    return LossResult(value=scale * total, grad=scale * grad, defined_terms=n_terms)


def weighted_ce(
    logits: np.ndarray,
    targets: np.ndarray,
    class_weights: np.ndarray | None = None,
    valid: np.ndarray | None = None,
    eps: float = EPS,
) -> LossResult:
    """Class-weighted cross entropy over valid voxels.

    Args:
        logits: [n, C] unnormalized scores.
        targets: either int class ids [n] or soft class fractions [n, C].
        class_weights: optional [C]; defaults to uniform.
        valid: optional [n] mask of voxels that carry supervision.

    The loss is sum_i sum_c w_c p_ic (-log q_ic) normalized by
    sum_i sum_c w_c p_ic, with log probabilities clamped at log(eps);
    clamped entries are flat and contribute no gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [n, C], got {logits.shape}")
    n, c = logits.shape
    valid = _resolve_defined(valid, n)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape != (n,):
            raise ValueError(f"targets must be [{n}] or [{n}, {c}]")
        ids = targets.astype(np.int64)
        inb = ids[valid]
        if inb.size and (inb.min() < 0 or inb.max() >= c):
            raise ValueError("target id out of range")
        fracs = np.zeros((n, c))
        fracs[np.arange(n)[valid], ids[valid]] = 1.0
    else:
        if targets.shape != (n, c):
            raise ValueError(f"targets must be [{n}] or [{n}, {c}]")
        fracs = targets.astype(np.float64)
        if fracs.min(initial=0.0) < 0:
            raise ValueError("negative target fraction")
    w = (
        np.ones(c)
        if class_weights is None
        else np.asarray(class_weights, dtype=np.float64)
    )
    if w.shape != (c,):
        raise ValueError(f"class_weights must be [{c}], got {w.shape}")

    fracs = np.where(valid[:, None], fracs, 0.0)
    wp = fracs * w  # [n, C]
    denom = float(wp.sum())
    if denom <= 0.0:
        raise ValueError("no weighted target mass on valid voxels")
    lp = log_softmax(logits, axis=-1)
    unclamped = lp > np.log(eps)
    lp_c = np.maximum(lp, np.log(eps))
    value = float(-(wp * lp_c).sum() / denom)
    s = softmax(logits, axis=-1)
    active = wp * unclamped
    grad = (s * active.sum(axis=1, keepdims=True) - active) / denom
    return LossResult(value=value, grad=grad, defined_terms=int(valid.sum()))


def split_bce(
    scores: np.ndarray,
    mask,
    eps: float = EPS,
) -> LossResult:
    """Binary cross entropy of split probabilities against a SubdivisionMask.

    scores: [n] probabilities over the flat coarse grid.  Undefined voxels
    are excluded from the mean; with nothing defined the loss is 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y_full = mask.flat_requires_split.astype(np.float64)
    defined = mask.flat_defined
    if scores.shape != y_full.shape:
        raise ValueError(f"scores shape {scores.shape} != grid {y_full.shape}")
    if scores.min(initial=0.0) < 0 or scores.max(initial=0.0) > 1.0:
        raise ValueError("scores must lie in [0, 1]")
    n_def = int(defined.sum())
    grad = np.zeros_like(scores)
    if n_def == 0:
        return LossResult(value=0.0, grad=grad, defined_terms=0)
    s_raw = scores[defined]
    y = y_full[defined]
    s = np.clip(s_raw, eps, 1.0 - eps)
    value = float(np.mean(-(y * np.log(s) + (1.0 - y) * np.log1p(-s))))
    inside = (s_raw > eps) & (s_raw < 1.0 - eps)
    g = np.where(inside, (s - y) / (s * (1.0 - s)), 0.0) / n_def
    grad[defined] = g
    return LossResult(value=value, grad=grad, defined_terms=n_def)


def smooth_l1(
    pred: np.ndarray,
    target: np.ndarray,
    valid: np.ndarray | None = None,
) -> LossResult:
    """Huber-style regression loss, mean over valid entries."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != pred.shape:
        raise ValueError(f"valid shape {valid.shape} != pred shape {pred.shape}")
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid entries")
    d = pred - target
    per = np.where(np.abs(d) < 1.0, 0.5 * d * d, np.abs(d) - 0.5)
    grad = np.where(valid, np.clip(d, -1.0, 1.0), 0.0) / n
    return LossResult(
        value=float(per[valid].sum() / n), grad=grad, defined_terms=n
    )


@dataclass
class TotalLossReport:
    """Combined objective with per-branch values and gradients.

    low.grad is with respect to the coarse logits, high.grad to the fine
    child logits, bce.grad to the split scores.
    """

    total: float
    low: LossResult
    high: LossResult
    bce: LossResult
    parts: dict[str, float] = field(default_factory=dict)


def total_loss(
    low_logits: np.ndarray,
    high_logits: np.ndarray,
    split_scores: np.ndarray,
    gt: SemanticGrid,
    selection,
    weights: LossWeights | None = None,
    pyramid: ClassHistogramGrid | None = None,
) -> TotalLossReport:
    """The full training objective of the two-resolution scheme.

    Coarse branch: lambda1 * CE against class fractions (soft targets by
    default, plurality ids when weights.hard_low_targets) plus lambda2 *
    geometric affinity.  Fine branch: unweighted-by-lambda CE plus
    geometric and semantic affinity against the one-hot child labels of
    the selected voxels.  Split branch: BCE of the split scores against
    the ground-truth subdivision mask.  An empty selection (or one with
    no valid children) zeroes the fine branch instead of failing.

    Args:
        low_logits: [n_low, C] coarse class logits over the flat half
            resolution grid.
        high_logits: [8K, C] child logits, parent-major octant order.
        split_scores: [n_low] split probabilities.
        gt: full-resolution ground truth; pyramid level 1 is derived from
            it unless `pyramid` is supplied.
        selection: SelectionSet of coarse voxels chosen for refinement.
    """
    from .hss import gather_child_labels  # local import, hss builds on this module

    weights = weights or LossWeights()
    hist = pyramid if pyramid is not None else build_histogram_pyramid(gt, 1)[0]
    if hist.spec.dims != gt.spec.halved().dims:
        raise ValueError("pyramid level does not match the ground truth grid")
    c = gt.num_classes
    fracs = hist.flat_fractions
    defined = hist.flat_defined
    n_low = fracs.shape[0]
    if low_logits.shape != (n_low, c):
        raise ValueError(
            f"low_logits must be [{n_low}, {c}], got {low_logits.shape}"
        )

    if weights.hard_low_targets:
        low_targets = plurality_labels(hist).reshape(-1)
    else:
        low_targets = fracs
    ce_low = weighted_ce(
        low_logits, low_targets, weights.ce_class_weights, valid=defined
    )
    probs_low = softmax(low_logits, axis=-1)
    mc_geo = multiclass_scal(probs_low, fracs, "geo", defined=defined)
    low = LossResult(
        value=weights.lambda1 * ce_low.value + weights.lambda2 * mc_geo.value,
        grad=weights.lambda1 * ce_low.grad
        + weights.lambda2 * softmax_vjp(probs_low, mc_geo.grad),
        defined_terms=ce_low.defined_terms + mc_geo.defined_terms,
    )

    onehot, child_valid = gather_child_labels(gt, selection)
    if high_logits.shape != onehot.shape:
        raise ValueError(
            f"high_logits must be {onehot.shape}, got {high_logits.shape}"
        )
    if selection.k == 0 or not child_valid.any():
        high = LossResult(0.0, np.zeros_like(np.asarray(high_logits, float)), 0)
        ce_h = sg = ss = LossResult(0.0, high.grad, 0)
    else:
        ce_h = weighted_ce(
            high_logits, onehot, weights.ce_class_weights, valid=child_valid
        )
        probs_high = softmax(np.asarray(high_logits, dtype=np.float64), axis=-1)
        sg = scal_onehot(probs_high, onehot, "geo", valid=child_valid)
        ss = scal_onehot(probs_high, onehot, "sem", valid=child_valid)
        high = LossResult(
            value=ce_h.value + sg.value + ss.value,
            grad=ce_h.grad + softmax_vjp(probs_high, sg.grad + ss.grad),
            defined_terms=ce_h.defined_terms + sg.defined_terms + ss.defined_terms,
        )

    bce = split_bce(split_scores, subdivision_mask(hist))
    total = low.value + high.value + bce.value
    parts = {
        "ce_low": ce_low.value,
        "scal_geo_low": mc_geo.value,
        "ce_high": ce_h.value,
        "scal_geo_high": sg.value,
        "scal_sem_high": ss.value,
        "split_bce": bce.value,
    }
    return TotalLossReport(total=total, low=low, high=high, bce=bce, parts=parts)
