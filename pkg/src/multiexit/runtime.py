"""Budget-aware inference and per-classifier diagnostics.

The confidence policy walks classifiers shallow to deep and answers at
the first one confident enough, touching no deeper layer.  Reporting
covers per-classifier accuracy, exit histograms, cost/accuracy curves
and the cross-classifier agreement statistics that motivate training
all classifiers jointly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import AugmentConfig, Dataset, eval_transform
from .network import MultiExitNetwork

POLICY_KINDS = ("confidence_threshold", "fixed_exit", "full_ensemble")
CONFIDENCE_MEASURES = ("max_prob", "entropy")


@dataclass(frozen=True)
class ExitPolicy:
    kind: str = "confidence_threshold"
    threshold: float = 0.5
    exit_index: int = 1
    confidence: str = "max_prob"

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"policy kind must be one of {POLICY_KINDS}, got {self.kind!r}")
        if self.confidence not in CONFIDENCE_MEASURES:
            raise ValueError(f"confidence must be one of {CONFIDENCE_MEASURES}")


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _confidence(probs: np.ndarray, measure: str) -> np.ndarray:
    """Per-row confidence in [0, 1]; rows are probability vectors."""
    if measure == "max_prob":
        return probs.max(axis=-1)
    m = probs.shape[-1]
    ent = -(probs * np.log(np.maximum(probs, 1e-12))).sum(axis=-1)
    return 1.0 - ent / math.log(m)


def _as_batch(sample: np.ndarray) -> np.ndarray:
    arr = np.asarray(sample, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise T.ShapeError(f"expected one sample [C, H, W], got {arr.shape}")
    return arr


def predict_early_exit(net: MultiExitNetwork, sample: np.ndarray,
                       policy: ExitPolicy) -> tuple[int, int, float]:
    """(class, exit_index, confidence) for one normalized sample.

    The confidence policy consumes the classifier stream lazily, so
    layers deeper than the taken exit are never evaluated.
    """
    x = T.Tensor(_as_batch(sample))
    n = net.num_classifiers
    if policy.kind == "fixed_exit":
        if not 1 <= policy.exit_index <= n:
            raise IndexError(f"exit_index {policy.exit_index} out of range [1, {n}]")
        logits, _ = net.forward_prefix(x, policy.exit_index)
        probs = _softmax_np(logits.data[0])
        return int(probs.argmax()), policy.exit_index, float(_confidence(probs, policy.confidence))
    if policy.kind == "full_ensemble":
        pairs = net.forward_all(x)
        probs = np.mean([_softmax_np(lg.data[0]) for lg, _ in pairs], axis=0)
        return int(probs.argmax()), n, float(_confidence(probs, policy.confidence))
    for k, (logits, _) in enumerate(net.iter_classifiers(x), start=1):
        probs = _softmax_np(logits.data[0])
        conf = float(_confidence(probs, policy.confidence))
        if conf >= policy.threshold or k == n:
            return int(probs.argmax()), k, conf
    raise AssertionError("unreachable: classifier N always answers")


def ensemble_predict(net: MultiExitNetwork, sample: np.ndarray) -> int:
    """Argmax of the mean of all classifiers' softmax distributions."""
    cls, _, _ = predict_early_exit(net, sample, ExitPolicy(kind="full_ensemble"))
    return cls


# ---------------------------------------------------------------------------
# dataset-level evaluation


def _batched_outputs(net: MultiExitNetwork, ds: Dataset, aug: AugmentConfig,
                     batch_size: int = 256, threads: int = 1):
    """Yield per-batch (probs[N, b, M], labels) from eval-mode forward_all.

    Eval passes are pure over an immutable network, so with threads > 1
    batches run on a pool; results are merged in sample order either way.
    """

    def one(start: int):
        images = ds.images[start : start + batch_size]
        labels = ds.labels[start : start + batch_size]
        x = T.Tensor(eval_transform(images, aug))
        pairs = net.forward_all(x)
        return np.stack([_softmax_np(lg.data) for lg, _ in pairs]), labels

    starts = range(0, len(ds), batch_size)
    if threads <= 1:
        for start in starts:
            yield one(start)
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            yield from pool.map(one, starts)


def evaluate_per_classifier(net: MultiExitNetwork, ds: Dataset, aug: AugmentConfig,
                            batch_size: int = 256, threads: int = 1) -> list[float]:
    """Top-1 accuracy of every classifier over the dataset."""
    correct = np.zeros(net.num_classifiers, dtype=np.int64)
    for probs, labels in _batched_outputs(net, ds, aug, batch_size, threads):
        preds = probs.argmax(axis=2)
        correct += (preds == labels[None, :]).sum(axis=1)
    return [float(c) / len(ds) for c in correct]


def exclusive_correct_stat(net: MultiExitNetwork, ds: Dataset, aug: AugmentConfig,
                           batch_size: int = 256, threads: int = 1) -> float:
    """Of the samples the first classifier gets right, the fraction no
    later classifier gets right."""
    if net.num_classifiers < 2:
        raise T.ContractError("exclusivity needs at least 2 classifiers")
    first_correct = 0
    exclusive = 0
    for probs, labels in _batched_outputs(net, ds, aug, batch_size, threads):
        preds = probs.argmax(axis=2)
        right = preds == labels[None, :]
        c1 = right[0]
        later_any = right[1:].any(axis=0)
        first_correct += int(c1.sum())
        exclusive += int((c1 & ~later_any).sum())
    return exclusive / first_correct if first_correct else 0.0


def agreement_matrix(net: MultiExitNetwork, ds: Dataset, aug: AugmentConfig,
                     batch_size: int = 256, threads: int = 1) -> np.ndarray:
    """agreement[i][j] = fraction of samples where classifiers i and j
    predict the same class."""
    n = net.num_classifiers
    agree = np.zeros((n, n), dtype=np.int64)
    for probs, _ in _batched_outputs(net, ds, aug, batch_size, threads):
        preds = probs.argmax(axis=2)
        for i in range(n):
            for j in range(n):
                agree[i, j] += int((preds[i] == preds[j]).sum())
    return agree / len(ds)


@dataclass
class PolicyResult:
    accuracy: float
    mean_macs: float
    exit_histogram: list[int]

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "mean_macs": self.mean_macs,
                "exit_histogram": self.exit_histogram}


def evaluate_policy(net: MultiExitNetwork, ds: Dataset, policy: ExitPolicy,
                    aug: AugmentConfig, batch_size: int = 256, threads: int = 1) -> PolicyResult:
    """Accuracy, mean MAC cost and exit histogram of a policy over a dataset."""
    n = net.num_classifiers
    macs = [net.count_flops(k) for k in range(1, n + 1)]
    hist = np.zeros(n, dtype=np.int64)
    correct = 0
    if policy.kind == "confidence_threshold":
        for probs, labels in _batched_outputs(net, ds, aug, batch_size, threads):
            exits, preds = _apply_threshold_rule(probs, policy)
            correct += int((preds == labels).sum())
            hist += np.bincount(exits, minlength=n)
    elif policy.kind == "fixed_exit":
        if not 1 <= policy.exit_index <= n:
            raise IndexError(f"exit_index {policy.exit_index} out of range [1, {n}]")
        for probs, labels in _batched_outputs(net, ds, aug, batch_size, threads):
            preds = probs[policy.exit_index - 1].argmax(axis=1)
            correct += int((preds == labels).sum())
            hist[policy.exit_index - 1] += len(labels)
    else:  # full_ensemble: every classifier runs, cost is the union of all paths
        for probs, labels in _batched_outputs(net, ds, aug, batch_size, threads):
            preds = probs.mean(axis=0).argmax(axis=1)
            correct += int((preds == labels).sum())
            hist[n - 1] += len(labels)
        mean = float(count_flops_all(net))
        return PolicyResult(correct / len(ds), mean, hist.tolist())
    mean_macs = float(np.dot(hist, macs) / len(ds))
    return PolicyResult(correct / len(ds), mean_macs, hist.tolist())


def _apply_threshold_rule(probs: np.ndarray, policy: ExitPolicy):
    """Vectorized confidence rule: first classifier with confidence >=
    threshold, else the deepest. probs is [N, b, M]."""
    n, b, _ = probs.shape
    conf = _confidence(probs, policy.confidence)  # [N, b]
    exits = np.full(b, n - 1, dtype=np.int64)
    undecided = np.ones(b, dtype=bool)
    for k in range(n - 1):
        take = undecided & (conf[k] >= policy.threshold)
        exits[take] = k
        undecided &= ~take
    preds = probs[exits, np.arange(b)].argmax(axis=1)
    return exits, preds


def count_flops_all(net: MultiExitNetwork) -> int:
    """MACs of one pass through every classifier (the ensemble cost):
    the full backbone plus all branch subtrees."""
    total = net.count_flops(net.num_classifiers)
    hw = net.input_hw
    h, w = hw
    # follow spatial dims through the stem and groups to price each branch
    _, hw = net.stem.conv.macs((h, w))
    sizes = {}
    for gi, blocks in enumerate(net.groups, start=1):
        for blk in blocks:
            _, hw = blk.macs(hw)
        sizes[gi] = hw
    for bi, branch in enumerate(net.branches):
        total += branch.macs(sizes[net.attach_points[bi]])
    return total


def budget_curve(net: MultiExitNetwork, ds: Dataset, thresholds: Sequence[float],
                 aug: AugmentConfig, confidence: str = "max_prob",
                 batch_size: int = 256, threads: int = 1) -> list[tuple[float, float]]:
    """One (mean MACs, accuracy) point per confidence threshold."""
    thresholds = list(thresholds)
    if thresholds != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    n = net.num_classifiers
    macs = np.array([net.count_flops(k) for k in range(1, n + 1)], dtype=np.float64)
    all_conf = []
    all_right = []
    for probs, labels in _batched_outputs(net, ds, aug, batch_size, threads):
        all_conf.append(_confidence(probs, confidence))
        all_right.append(np.stack([probs[k].argmax(axis=1) == labels for k in range(n)]))
    conf = np.concatenate(all_conf, axis=1)  # [N, count]
    right = np.concatenate(all_right, axis=1)
    count = conf.shape[1]
    points = []
    for thr in thresholds:
        exits = np.full(count, n - 1, dtype=np.int64)
        undecided = np.ones(count, dtype=bool)
        for k in range(n - 1):
            take = undecided & (conf[k] >= thr)
            exits[take] = k
            undecided &= ~take
        acc = float(right[exits, np.arange(count)].mean())
        cost = float(macs[exits].mean())
        points.append((cost, acc))
    return points


# ---------------------------------------------------------------------------
# reporting


@dataclass
class EvalReport:
    per_classifier_accuracy: list[float]
    per_exit_macs: list[int]
    exclusivity: float
    policy: Optional[dict] = None
    agreement: Optional[list[list[float]]] = None
    budget: Optional[list[list[float]]] = None
    dataset: str = ""
    count: int = 0

    def to_json(self) -> str:
        payload = {
            "per_classifier_accuracy": self.per_classifier_accuracy,
            "per_exit_macs": self.per_exit_macs,
            "exclusivity": self.exclusivity,
            "policy": self.policy,
            "agreement": self.agreement,
            "budget": self.budget,
            "dataset": self.dataset,
            "count": self.count,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def format_table(self) -> str:
        n = len(self.per_classifier_accuracy)
        header = "classifier " + "".join(f"{i:>10d}" for i in range(1, n + 1))
        accs = "accuracy   " + "".join(f"{a:>10.4f}" for a in self.per_classifier_accuracy)
        macs = "MACs (M)   " + "".join(f"{m / 1e6:>10.2f}" for m in self.per_exit_macs)
        return "\n".join([header, accs, macs])


def build_report(net: MultiExitNetwork, ds: Dataset, aug: AugmentConfig,
                 policy: Optional[ExitPolicy] = None,
                 thresholds: Optional[Sequence[float]] = None,
                 with_agreement: bool = False, batch_size: int = 256,
                 threads: int = 1) -> EvalReport:
    n = net.num_classifiers
    report = EvalReport(
        per_classifier_accuracy=evaluate_per_classifier(net, ds, aug, batch_size, threads),
        per_exit_macs=[net.count_flops(k) for k in range(1, n + 1)],
        exclusivity=exclusive_correct_stat(net, ds, aug, batch_size, threads) if n >= 2 else 0.0,
        dataset=ds.split,
        count=len(ds),
    )
    if policy is not None:
        report.policy = evaluate_policy(net, ds, policy, aug, batch_size, threads).to_dict()
    if thresholds is not None:
        report.budget = [list(p) for p in budget_curve(net, ds, thresholds, aug,
                                                       batch_size=batch_size, threads=threads)]
    if with_agreement:
        report.agreement = agreement_matrix(net, ds, aug, batch_size, threads).tolist()
    return report
