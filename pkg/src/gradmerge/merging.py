"""Model merging schemes and the curvature-weighted data-removal update.

All merges are pure functions from checkpoints to a merged parameter
vector.  The catalog:

* ``merge_average`` — arithmetic mean of task parameters, or a weighted
  mean that includes the anchor.
* ``merge_fisher`` — Fisher-weighted averaging: each parameter is a
  curvature-weighted mean of the task values.
* ``merge_task_arithmetic`` — anchor plus scaled task increments
  ``theta_t - theta_anchor``; negative scales subtract a task.
* ``merge_fa1`` — a Fisher-style variant that weights task *increments*
  by Fishers evaluated at the increment vectors; included as a baseline.
* ``merge_uncertainty`` — the curvature-preconditioned merge: with
  pooled curvature ``hbar = h0 + sum_t alpha_t h_t``, the output is

      anchor + sum_t alpha_t hbar^-1 (h0 + h_t) (theta_t - anchor).

  With identity anchor curvature and zero task curvature this reduces
  exactly to task arithmetic (and with alpha = 1/T to the arithmetic
  mean), making the implicit assumptions of those schemes explicit.  On
  anchored linear regression with exact Hessians it reproduces the
  jointly trained model exactly, and its output is the stationary point
  of the quadratic surrogate objective checked by the oracles module.
* ``merge_masked`` — trim/elect-sign sparse merging: keep only the
  largest task increments (optionally resolving per-coordinate sign
  conflicts by magnitude-weighted majority) and apply task arithmetic to
  the survivors.
* ``remove_task`` — inverse merge: subtract one task's contribution from
  a model trained on a superset of data, preconditioned by the curvature
  of the retained data.  On anchored linear regression with exact
  curvature this coincides with leave-subset-out retraining.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    EmptyMergeError,
    LayoutError,
    MissingCurvatureError,
    SingularCurvatureError,
)
from .params import (
    Checkpoint,
    DiagCurvature,
    ParamVector,
    combine,
    precondition_combine,
)

__all__ = [
    "MergeInputs",
    "MaskConfig",
    "merge_average",
    "merge_fisher",
    "merge_task_arithmetic",
    "merge_fa1",
    "merge_uncertainty",
    "merge_masked",
    "remove_task",
    "merge",
    "merged_checkpoint",
    "ADDITION_METHODS",
]

logger = logging.getLogger(__name__)

#: Method registry keys accepted by :func:`merge`.
ADDITION_METHODS = ("am", "wam", "ta", "fa", "fa1", "ties", "ours")


@dataclass(frozen=True, eq=False)
class MergeInputs:
    """Anchor checkpoint, weighted task checkpoints, and a curvature ridge.

    ``delta`` is added elementwise to the anchor curvature wherever a
    merge uses it, mirroring the ridge used when the anchor was trained.
    Negative task weights are legal at this level; merges that cannot
    interpret them reject them individually.
    """

    anchor: Checkpoint
    tasks: tuple[tuple[float, Checkpoint], ...] = ()
    delta: float = 0.0

    def __post_init__(self):
        tasks = tuple((float(alpha), ckpt) for alpha, ckpt in self.tasks)
        layout = self.anchor.layout
        for alpha, ckpt in tasks:
            if not math.isfinite(alpha):
                raise ConfigError("task weights must be finite")
            if ckpt.layout != layout:
                raise LayoutError("all merge checkpoints must share the anchor layout")
        if not (math.isfinite(self.delta) and self.delta >= 0):
            raise ConfigError("delta must be finite and >= 0")
        object.__setattr__(self, "tasks", tasks)

    @property
    def layout(self):
        return self.anchor.layout

    @property
    def alphas(self) -> tuple[float, ...]:
        return tuple(alpha for alpha, _ in self.tasks)


@dataclass(frozen=True)
class MaskConfig:
    """Sparse-merge settings: fraction of coordinates kept per task, and
    whether conflicting signs are resolved by majority election."""

    keep_fraction: float = 0.2
    elect_sign: bool = False

    def __post_init__(self):
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError("keep_fraction must lie in (0, 1]")


def _require_nonnegative_alphas(inputs: MergeInputs, method: str) -> None:
    if any(alpha < 0 for alpha in inputs.alphas):
        raise ConfigError(f"{method} does not accept negative task weights")


def _task_curvatures(inputs: MergeInputs, method: str) -> list[DiagCurvature]:
    out = []
    for i, (_, ckpt) in enumerate(inputs.tasks):
        if ckpt.curvature is None:
            raise MissingCurvatureError(f"{method} needs curvature on every task checkpoint; task {i} has none")
        out.append(ckpt.curvature)
    return out


def _anchor_h0(inputs: MergeInputs) -> DiagCurvature:
    """Anchor curvature plus the ridge; identity fallback with a warning."""
    layout = inputs.layout
    if inputs.anchor.curvature is None:
        logger.warning(
            "anchor checkpoint has no curvature; falling back to identity anchor curvature"
        )
        base = np.ones(layout.total_len)
    else:
        base = inputs.anchor.curvature.values
    return DiagCurvature(layout, base + inputs.delta)


def merge_average(inputs: MergeInputs, weighted: bool = False, alpha0: float = 0.0) -> ParamVector:
    """Arithmetic mean of task parameters, or a weighted mean with the anchor.

    Unweighted: ignores the stored task weights and averages the task
    checkpoints with weight 1/T.  Weighted: ``alpha0 * anchor +
    sum_t alpha_t * theta_t``; the weights are used as given and are not
    renormalized.
    """
    if not inputs.tasks:
        raise EmptyMergeError("cannot average zero task checkpoints")
    _require_nonnegative_alphas(inputs, "averaging")
    if not weighted:
        T = len(inputs.tasks)
        return combine([(1.0 / T, ckpt.params) for _, ckpt in inputs.tasks])
    if alpha0 < 0:
        raise ConfigError("weighted averaging does not accept a negative anchor weight")
    terms = [(float(alpha0), inputs.anchor.params)]
    terms += [(alpha, ckpt.params) for alpha, ckpt in inputs.tasks]
    return combine(terms)


def merge_fisher(inputs: MergeInputs, include_anchor: bool = False) -> ParamVector:
    """Fisher averaging: elementwise curvature-weighted mean of parameters.

    Computes ``(sum_t alpha_t F_t theta_t) / (sum_t alpha_t F_t)``; with
    ``include_anchor`` the anchor joins the sum with weight 1 and its own
    Fisher.
    """
    if not inputs.tasks:
        raise EmptyMergeError("cannot Fisher-average zero task checkpoints")
    _require_nonnegative_alphas(inputs, "Fisher averaging")
    fishers = _task_curvatures(inputs, "Fisher averaging")
    layout = inputs.layout
    num = np.zeros(layout.total_len)
    den = np.zeros(layout.total_len)
    if include_anchor:
        if inputs.anchor.curvature is None:
            raise MissingCurvatureError(
                "Fisher averaging with include_anchor needs curvature on the anchor checkpoint"
            )
        num += inputs.anchor.curvature.values * inputs.anchor.params.values
        den += inputs.anchor.curvature.values
    for (alpha, ckpt), fisher in zip(inputs.tasks, fishers):
        num += alpha * fisher.values * ckpt.params.values
        den += alpha * fisher.values
    if np.any(den <= 0.0):
        raise SingularCurvatureError(
            "pooled Fisher has non-positive entries; increase the floor or task weights"
        )
    return ParamVector(layout, num / den)


def merge_task_arithmetic(inputs: MergeInputs) -> ParamVector:
    """Anchor plus weighted task increments; negative weights subtract."""
    terms = [(1.0, inputs.anchor.params)]
    for alpha, ckpt in inputs.tasks:
        terms.append((alpha, ckpt.params))
        terms.append((-alpha, inputs.anchor.params))
    return combine(terms)


def merge_fa1(inputs: MergeInputs) -> ParamVector:
    """Fisher-weighted increment averaging (baseline).

    ``F_bar^-1 (F_anchor theta_anchor + sum_t alpha_t Fhat_t
    (theta_t - theta_anchor))`` with ``F_bar = F_anchor + sum_t alpha_t
    Fhat_t``.  The task Fishers ``Fhat_t`` are understood to be evaluated
    at the increment vectors and must be supplied by the caller in the
    task checkpoints' curvature slots.  The scheme mixes a weighted
    *parameter* with weighted *increments*, so it is kept only for
    comparison.
    """
    if not inputs.tasks:
        raise EmptyMergeError("cannot merge zero task checkpoints")
    _require_nonnegative_alphas(inputs, "fa1")
    if inputs.anchor.curvature is None:
        raise MissingCurvatureError("fa1 needs curvature on the anchor checkpoint")
    fishers = _task_curvatures(inputs, "fa1")
    layout = inputs.layout
    f0 = inputs.anchor.curvature.values
    num = f0 * inputs.anchor.params.values
    den = f0.copy()
    for (alpha, ckpt), fisher in zip(inputs.tasks, fishers):
        num += alpha * fisher.values * (ckpt.params.values - inputs.anchor.params.values)
        den += alpha * fisher.values
    if np.any(den <= 0.0):
        raise SingularCurvatureError("pooled fa1 Fisher has non-positive entries")
    return ParamVector(layout, num / den)


def merge_uncertainty(inputs: MergeInputs) -> ParamVector:
    """Curvature-preconditioned merge around the anchor.

    Pools curvature as ``hbar = h0 + sum_t alpha_t h_t`` and moves the
    anchor along each task increment with the per-coordinate factor
    ``alpha_t * (h0 + h_t) / hbar``.  ``h0`` is the anchor curvature plus
    the ridge ``delta``; an anchor without curvature falls back to the
    identity with a logged warning.
    """
    h0 = _anchor_h0(inputs)
    task_curv = _task_curvatures(inputs, "uncertainty merging")
    hbar_values = h0.values.copy()
    for (alpha, _), ht in zip(inputs.tasks, task_curv):
        hbar_values = hbar_values + alpha * ht.values
    if np.any(hbar_values <= 0.0):
        raise SingularCurvatureError("pooled curvature must be strictly positive elementwise")
    hbar = DiagCurvature(inputs.layout, hbar_values)
    terms = [
        (alpha, h0, ht, ckpt.params)
        for (alpha, ckpt), ht in zip(inputs.tasks, task_curv)
    ]
    return precondition_combine(inputs.anchor.params, terms, hbar)


def _top_k_mask(increment: np.ndarray, k: int) -> np.ndarray:
    """Binary mask of the k largest-magnitude entries; ties prefer lower index."""
    order = np.argsort(-np.abs(increment), kind="stable")
    mask = np.zeros(increment.size)
    mask[order[:k]] = 1.0
    return mask


def merge_masked(inputs: MergeInputs, mask_cfg: MaskConfig = MaskConfig()) -> ParamVector:
    """Trim/elect-sign sparse merge.

    Per task, only the ``ceil(keep_fraction * d)`` largest-magnitude
    increment coordinates survive (ties broken toward lower indices), and
    task arithmetic runs on the survivors.  With ``elect_sign``, each
    coordinate first elects a sign by magnitude-weighted majority over
    the masked, weighted increments; contributions disagreeing with the
    elected sign are zeroed.  The election rule is one concrete choice
    among several used in practice and is labeled experimental.
    """
    _require_nonnegative_alphas(inputs, "masked merging")
    if not inputs.tasks:
        return inputs.anchor.params
    d = inputs.layout.total_len
    k = int(math.ceil(mask_cfg.keep_fraction * d))
    anchor_values = inputs.anchor.params.values
    contributions = []
    for alpha, ckpt in inputs.tasks:
        increment = ckpt.params.values - anchor_values
        mask = _top_k_mask(increment, k)
        contributions.append(alpha * mask * increment)
    stacked = np.vstack(contributions)
    if mask_cfg.elect_sign:
        elected = np.sign(stacked.sum(axis=0))
        agree = np.sign(stacked) == elected
        stacked = np.where(agree, stacked, 0.0)
    return ParamVector(inputs.layout, anchor_values + stacked.sum(axis=0))


def remove_task(
    anchor: Checkpoint,
    task: tuple[float, Checkpoint],
    hbar_minus: DiagCurvature,
    h0: DiagCurvature,
    delta: float = 0.0,
) -> ParamVector:
    """Subtract one task's contribution from an anchor model.

    ``anchor - alpha * (h0 + h_t) / (hbar_minus + delta) * (theta_t -
    anchor)``, where ``hbar_minus`` is the curvature of the *retained*
    data at the anchor and ``h0`` the penalty diagonal the task model was
    fine-tuned under.  The plain increment-subtraction variant is
    :func:`merge_task_arithmetic` with a negative weight.
    """
    alpha, ckpt = task
    layout = anchor.layout
    if ckpt.layout != layout or hbar_minus.layout != layout or h0.layout != layout:
        raise LayoutError("removal inputs must share the anchor layout")
    if ckpt.curvature is None:
        raise MissingCurvatureError("remove_task needs curvature on the task checkpoint")
    if delta < 0 or not math.isfinite(delta):
        raise ConfigError("delta must be finite and >= 0")
    denom = hbar_minus.values + delta
    if np.any(denom <= 0.0):
        raise SingularCurvatureError("retained-data curvature plus delta must be strictly positive")
    hbar = DiagCurvature(layout, denom)
    return precondition_combine(
        anchor.params, [(-float(alpha), h0, ckpt.curvature, ckpt.params)], hbar
    )


def merge(method: str, inputs: MergeInputs, *, mask: MaskConfig | None = None, alpha0: float | None = None) -> ParamVector:
    """Dispatch a merge by registry name (see ``ADDITION_METHODS``).

    For ``wam``, the anchor weight defaults to ``max(0, 1 - sum alpha_t)``
    so that the weights form a convex-style combination around the anchor.
    """
    if method == "am":
        return merge_average(inputs, weighted=False)
    if method == "wam":
        if alpha0 is None:
            alpha0 = max(0.0, 1.0 - sum(inputs.alphas))
        return merge_average(inputs, weighted=True, alpha0=alpha0)
    if method == "ta":
        return merge_task_arithmetic(inputs)
    if method == "fa":
        return merge_fisher(inputs, include_anchor=True)
    if method == "fa1":
        return merge_fa1(inputs)
    if method == "ties":
        return merge_masked(inputs, mask or MaskConfig())
    if method == "ours":
        return merge_uncertainty(inputs)
    raise ConfigError(f"unknown merge method {method!r}; expected one of {ADDITION_METHODS}")


def merged_checkpoint(method: str, inputs: MergeInputs, params: ParamVector, extra_meta: dict[str, str] | None = None) -> Checkpoint:
    """Wrap a merge result as a checkpoint recording method and weights."""
    meta = {
        "method": method,
        "alphas": ",".join(repr(a) for a in inputs.alphas),
    }
    meta.update(extra_meta or {})
    return Checkpoint.of(params, anchor_id=inputs.anchor.anchor_id, meta=meta)
