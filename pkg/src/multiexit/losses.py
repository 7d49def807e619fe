"""The three-part training objective for multi-classifier networks.

total = (1 - alpha) * label_loss + alpha * kd_loss + beta * feature_loss

* label_loss: summed per-classifier cross entropy.
* kd_loss: every classifier distills from every other one; softened
  distributions at temperature tau, KL against each peer, averaged by
  the per-classifier teacher count (N - 1).
* feature_loss: squared L2 pull of each pre-FC feature toward the
  deepest classifier's.

beta follows a cosine schedule from beta_begin to beta_end so the
feature hint fades as training progresses.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

# instrumentation: how many times each component was actually computed
call_counts: Counter = Counter()


def reset_call_counts() -> None:
    call_counts.clear()


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta_begin: float = 1e-2
    beta_end: float = 0.0
    tau: Optional[float] = None  # resolved from the class count when None
    detach_teachers: bool = True
    kd_tau_sq_scale: bool = True
    kl_teacher_first: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta_begin < 0 or self.beta_end < 0:
            raise ValueError("beta endpoints must be nonnegative")
        if self.tau is not None and self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")

    def resolve_tau(self, num_classes: int) -> "LossConfig":
        if self.tau is not None:
            return self
        return replace(self, tau=default_tau(num_classes))


def default_tau(num_classes: int) -> float:
    return 3.0 if num_classes <= 10 else 4.0


@dataclass
class LossBreakdown:
    loss1: float
    loss2: float
    loss3: float
    beta_used: float
    total: float
    total_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    CSV_FIELDS = ("loss1", "loss2", "loss3", "beta_used", "total")

    def csv_values(self) -> tuple[float, ...]:
        return (self.loss1, self.loss2, self.loss3, self.beta_used, self.total)


def label_loss(outputs: Sequence[Tensor], labels: np.ndarray) -> Tensor:
    """Sum over classifiers of batch-mean cross entropy."""
    if len(outputs) < 1:
        raise T.ContractError("label_loss needs at least one classifier")
    batch = outputs[0].shape[0]
    for o in outputs:
        if o.shape[0] != batch:
            raise T.ShapeError(f"inconsistent batch sizes: {o.shape[0]} != {batch}")
    call_counts["label_loss"] += 1
    total = T.cross_entropy(outputs[0], labels)
    for o in outputs[1:]:
        total = T.add(total, T.cross_entropy(o, labels))
    return total


def kd_loss(outputs: Sequence[Tensor], tau: float, detach_teachers: bool = True,
            tau_sq_scale: bool = True, teacher_first: bool = True,
            teacher_index: Optional[int] = None) -> Tensor:
    """Pairwise mutual distillation across classifiers.

    Every classifier is the student of all N-1 others; the ordered-pair
    KL sum is divided by N-1.  With teacher_index set (0-based), only
    that classifier teaches and the restricted pair sum is returned
    unnormalized.  Teachers carry no gradient when detach_teachers.
    """
    n = len(outputs)
    if n < 2:
        raise T.ContractError("KD needs a peer: at least two classifiers required")
    call_counts["kd_loss"] += 1
    students = [T.tempered_softmax(o, tau) for o in outputs]
    if detach_teachers:
        teachers = [T.tempered_softmax(o.detach(), tau) for o in outputs]
    else:
        teachers = students
    total = None
    for i in range(n):  # student
        js = range(n) if teacher_index is None else (teacher_index,)
        for j in js:  # teacher
            if j == i:
                continue
            if teacher_first:
                term = T.kl_divergence(teachers[j], students[i])
            else:
                term = T.kl_divergence(students[i], teachers[j])
            total = term if total is None else T.add(total, term)
    scale = 1.0 if teacher_index is not None else 1.0 / (n - 1)
    if tau_sq_scale:
        scale *= tau * tau
    return T.scale(total, scale)


def feature_loss(features: Sequence[Tensor], detach_deepest: bool = True) -> Tensor:
    """Squared L2 distance of every early feature to the deepest one."""
    n = len(features)
    if n < 2:
        raise T.ContractError("feature_loss needs at least two classifiers")
    shape = features[-1].shape
    for f in features:
        if f.shape != shape:
            raise T.ShapeError(f"feature shapes differ: {f.shape} != {shape}")
    call_counts["feature_loss"] += 1
    anchor = features[-1].detach() if detach_deepest else features[-1]
    total = T.l2_distance_sq(features[0], anchor)
    for f in features[1:-1]:
        total = T.add(total, T.l2_distance_sq(f, anchor))
    return total


def beta_schedule(epoch: int, total: int, beta_begin: float, beta_end: float) -> float:
    """Cosine decay from beta_begin (epoch 0) to beta_end (epoch == total).

    The endpoints and midpoint are anchored exactly; floating-point
    cos() would otherwise miss them by an ulp or two.
    """
    if total < 1:
        raise ValueError(f"total epochs must be >= 1, got {total}")
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    if epoch == 0:
        return beta_begin
    if epoch == total:
        return beta_end
    if 2 * epoch == total:
        return 0.5 * (beta_begin + beta_end)
    return beta_end + 0.5 * (beta_begin - beta_end) * (1.0 + math.cos(math.pi * epoch / total))


def total_loss(outputs: Sequence[Tensor], features: Sequence[Tensor], labels: np.ndarray,
               config: LossConfig, epoch: int, total_epochs: int,
               mode: str = "msd") -> LossBreakdown:
    """Assemble the weighted objective; zero-weight components are skipped."""
    config.validate()
    if config.tau is None:
        raise ValueError("LossConfig.tau unresolved; call resolve_tau first")
    w1 = 1.0 - config.alpha
    w2 = config.alpha
    beta = beta_schedule(epoch, total_epochs, config.beta_begin, config.beta_end)

    parts = []
    l1 = l2 = l3 = 0.0
    if w1 > 0.0:
        t1 = label_loss(outputs, labels)
        l1 = t1.item()
        parts.append((w1, t1))
    if w2 > 0.0:
        teacher_index = len(outputs) - 1 if mode == "deepest_self_distill" else None
        t2 = kd_loss(outputs, config.tau, config.detach_teachers, config.kd_tau_sq_scale,
                     config.kl_teacher_first, teacher_index)
        l2 = t2.item()
        parts.append((w2, t2))
    if beta > 0.0:
        t3 = feature_loss(features, config.detach_teachers)
        l3 = t3.item()
        parts.append((beta, t3))

    if parts:
        total = T.scale(parts[0][1], parts[0][0])
        for w, t in parts[1:]:
            total = T.add(total, T.scale(t, w))
    else:
        total = Tensor(np.zeros((), dtype=outputs[0].dtype))

    breakdown = LossBreakdown(l1, l2, l3, beta, total.item(), total)
    recomposed = w1 * l1 + w2 * l2 + beta * l3
    assert abs(breakdown.total - recomposed) <= 1e-6 * max(1.0, abs(recomposed)), \
        f"loss recomposition drift: {breakdown.total} vs {recomposed}"
    return breakdown
