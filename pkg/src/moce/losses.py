"""Training objectives.

The base objective is binary cross-entropy from logits. Four collaboration
terms shape the expert pool: an attention-cosine penalty pushing expert
projections apart, a per-expert supervised term over assigned samples, and
coefficient-of-variation penalties on expert importance (squared) and
expected load (first power). The composed objective adds beta times their
sum to the base loss.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class BadBeta(ValueError):
    """The collaboration weight beta must lie in (0, 1]."""


class ZeroNormTheta(UserWarning):
    """An attention vector had zero norm and was replaced by a basis vector."""


_EPS_MEAN = 1e-10


def bce(logit: Tensor, label) -> Tensor:
    """Binary cross-entropy from logits, elementwise.

    Computed as max(z, 0) - z*y + log(1 + exp(-|z|)), which never
    exponentiates a positive argument. ``label`` may be a scalar or an
    array broadcastable against ``logit``.
    """
    z = logit if isinstance(logit, Tensor) else Tensor(np.asarray(logit, dtype=np.float64))
    y = Tensor(np.asarray(label, dtype=z.dtype))
    pos = ad.relu(z)
    abs_z = ad.add(pos, ad.relu(ad.negate(z)))
    return ad.add(ad.sub(pos, ad.mul(z, y)), ad.softplus(ad.negate(abs_z)))


def attention_cosine_loss(thetas: list[Tensor]) -> Tensor:
    """Mean pairwise cosine similarity of the expert attention vectors.

    Each vector is normalized to unit length; the loss averages the full
    M x M similarity table (diagonal included), which collapses to
    ||sum of unit vectors||^2 / M^2. A zero-norm vector cannot be
    normalized: it is replaced by the first basis vector and a
    ZeroNormTheta warning is recorded.
    """
    if not thetas:
        raise ValueError("attention loss needs at least one vector")
    m = len(thetas)
    total = None
    for theta in thetas:
        flat = ad.reshape(theta, (-1,))
        norm = ad.sqrt(ad.reduce_sum(ad.mul(flat, flat)))
        if norm.data == 0.0:
            warnings.warn("zero-norm attention vector replaced by basis vector",
                          ZeroNormTheta)
            basis = np.zeros(flat.shape[0], dtype=flat.dtype)
            basis[0] = 1.0
            unit = Tensor(basis)
        else:
            unit = ad.div(flat, norm)
        total = unit if total is None else ad.add(total, unit)
    dot = ad.reduce_sum(ad.mul(total, total))
    return ad.mul(dot, Tensor(np.asarray(1.0 / (m * m))))


def expert_specific_loss(per_expert_logits: Tensor, labels,
                         assignment: np.ndarray) -> Tensor:
    """Sum of BCE over every (sample, expert) pair the router assigned.

    ``per_expert_logits`` is (batch, experts); ``assignment`` is a 0/1
    matrix of the same shape (1 where the sample's gate for that expert is
    positive). The result is a raw sum, so each routed pair adds its full
    term regardless of batch size.
    """
    y = np.asarray(labels, dtype=per_expert_logits.dtype).reshape(-1, 1)
    mask = Tensor(np.asarray(assignment, dtype=per_expert_logits.dtype))
    per_pair = bce(per_expert_logits, y)
    return ad.reduce_sum(ad.mul(per_pair, mask))


def _importance_stats(per_expert_sums: Tensor) -> tuple[Tensor, Tensor]:
    """Population variance and guarded mean of a per-expert total."""
    mean = ad.reduce_mean(per_expert_sums)
    centered = ad.sub(per_expert_sums, mean)
    var = ad.reduce_mean(ad.mul(centered, centered))
    guarded = ad.add(mean, Tensor(np.asarray(_EPS_MEAN)))
    return var, guarded


def importance_loss(gates: Tensor, beta_scale: float = 1.0) -> Tensor:
    """Squared coefficient of variation of total gate mass per expert.

    ``gates`` is the (batch, experts) gate matrix; importance of expert j is
    the column sum. Equal importances give exactly zero.
    """
    importance = ad.reduce_sum(gates, axis=0)
    var, guarded = _importance_stats(importance)
    cv_sq = ad.div(var, ad.mul(guarded, guarded))
    return ad.mul(cv_sq, Tensor(np.asarray(beta_scale)))


def load_loss(p_choose: Tensor, beta_scale: float = 1.0) -> Tensor:
    """Coefficient of variation (first power) of expected expert load.

    ``p_choose`` is the (batch, experts) matrix of selection probabilities
    under fresh routing noise; load of expert j is the column sum.
    """
    load = ad.reduce_sum(p_choose, axis=0)
    var, guarded = _importance_stats(load)
    cv = ad.div(ad.sqrt(var), guarded)
    return ad.mul(cv, Tensor(np.asarray(beta_scale)))


@dataclass(frozen=True)
class LossToggles:
    """Which collaboration terms participate in the objective.

    A disabled term contributes exactly zero to the composed loss and to
    every gradient, which is what the ablation comparisons switch."""

    att: bool = True
    exp: bool = True
    imp: bool = True
    lod: bool = True


@dataclass
class LossBreakdown:
    """Composed objective with every term exposed for logging."""

    base: Tensor
    att: Tensor
    exp: Tensor
    imp: Tensor
    lod: Tensor
    col: Tensor
    overall: Tensor
    beta: float

    def floats(self) -> dict[str, float]:
        return {
            "base": float(self.base.data),
            "att": float(self.att.data),
            "exp": float(self.exp.data),
            "imp": float(self.imp.data),
            "lod": float(self.lod.data),
            "col": float(self.col.data),
            "overall": float(self.overall.data),
            "beta": self.beta,
        }


def overall_loss(base: Tensor, att: Tensor, exp: Tensor, imp: Tensor,
                 lod: Tensor, beta: float) -> LossBreakdown:
    """base + beta * (att + exp + imp + lod), with the parts retained."""
    if not 0.0 < beta <= 1.0:
        raise BadBeta(f"beta must be in (0, 1], got {beta}")
    col = ad.add(ad.add(att, exp), ad.add(imp, lod))
    overall = ad.add(base, ad.mul(col, Tensor(np.asarray(beta))))
    return LossBreakdown(base=base, att=att, exp=exp, imp=imp, lod=lod,
                         col=col, overall=overall, beta=beta)
