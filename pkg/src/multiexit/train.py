"""Mini-batch SGD training loop with the distillation objective.

Single-threaded and fully seeded: one RNG drives shuffling and
augmentation, so a run replays bit-for-bit from the same seed, and a
checkpoint restores mid-run state exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import losses, network, runtime, serialize
from . import tensor as T
from .data import AugmentConfig, Dataset, augment_batch, batch_iter
from .losses import LossBreakdown, LossConfig, total_loss

MODES = ("msd", "joint", "deepest_self_distill")


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss."""

    def __init__(self, batch_index: int, breakdown: LossBreakdown):
        self.batch_index = batch_index
        self.breakdown = breakdown
        super().__init__(
            f"non-finite loss at batch {batch_index}: "
            f"loss1={breakdown.loss1} loss2={breakdown.loss2} "
            f"loss3={breakdown.loss3} beta={breakdown.beta_used} total={breakdown.total}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    lr_milestones: Optional[tuple[tuple[int, float], ...]] = None  # None -> x0.1 at 50%/75%
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    mode: str = "msd"

    def resolved(self, num_classes: int) -> "TrainConfig":
        """Fill defaults and apply mode couplings; validates."""
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1, lr > 0")
        loss = self.loss
        if self.mode == "joint":
            loss = dataclasses.replace(loss, alpha=0.0, beta_begin=0.0, beta_end=0.0)
        loss = loss.resolve_tau(num_classes)
        loss.validate()
        milestones = self.lr_milestones
        if milestones is None:
            milestones = tuple(
                (e, 0.1) for e in (self.epochs // 2, (3 * self.epochs) // 4) if 0 < e < self.epochs)
        else:
            milestones = tuple((int(e), float(f)) for e, f in milestones)
        return dataclasses.replace(self, loss=loss, lr_milestones=milestones)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for e, factor in self.lr_milestones or ():
            if epoch >= e:
                lr *= factor
        return lr

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_milestones"] = [list(m) for m in self.lr_milestones] if self.lr_milestones else None
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss"))
        ms = d.pop("lr_milestones", None)
        milestones = tuple((int(e), float(f)) for e, f in ms) if ms else None
        return TrainConfig(loss=loss, lr_milestones=milestones, **d)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    best_acc: Optional[list[float]] = None
    best_epoch: int = -1

    @staticmethod
    def fresh(seed: int) -> "TrainState":
        return TrainState(rng=np.random.default_rng(seed))


def sgd_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               momentum_buffers: dict[str, np.ndarray], lr: float, momentum: float,
               weight_decay: float) -> None:
    """v <- momentum*v + grad + wd*w;  w <- w - lr*v.  In place."""
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise T.ShapeError(f"{name}: grad shape {g.shape} != param shape {w.shape}")
        v = momentum_buffers.get(name)
        if v is None:
            v = np.zeros_like(w)
            momentum_buffers[name] = v
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * w
        w -= lr * v


def decayed_param_names(params: dict[str, T.Tensor]) -> set[str]:
    """Weight decay applies to conv/linear weights only, never to biases
    or batch-norm scale/shift."""
    return {n for n in params if n.endswith(".weight")}


def train_epoch(state: TrainState, net: network.MultiExitNetwork, train_set: Dataset,
                config: TrainConfig, aug: AugmentConfig,
                log_rows: Optional[list] = None) -> list[LossBreakdown]:
    """One shuffled pass; returns the per-step loss breakdowns."""
    if len(train_set) == 0:
        raise T.ContractError("cannot train on an empty dataset")
    if config.mode == "msd" and net.num_classifiers < 2:
        raise T.ContractError("msd mode needs a network with at least 2 classifiers")
    params = net.named_parameters()
    decay_names = decayed_param_names(params)
    lr = config.lr_at(state.epoch)
    breakdowns = []
    for batch_index, (images, labels) in enumerate(
            batch_iter(train_set, config.batch_size, shuffle=True, rng=state.rng)):
        x = T.Tensor(augment_batch(images, aug, state.rng))
        with T.Tape() as tape:
            pairs = net.forward_all(x, training=True)
            outputs = [p[0] for p in pairs]
            features = [p[1] for p in pairs]
            bd = total_loss(outputs, features, labels, config.loss,
                            state.epoch, max(config.epochs, 1), config.mode)
        if not np.isfinite(bd.total):
            raise TrainingDiverged(batch_index, bd)
        net.zero_grad()
        T.backward(tape, bd.total_tensor)
        decayed = {n: p.data for n, p in params.items() if n in decay_names}
        plain = {n: p.data for n, p in params.items() if n not in decay_names}
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for n, p in params.items()}
        sgd_update(decayed, grads, state.momentum, lr, config.momentum, config.weight_decay)
        sgd_update(plain, grads, state.momentum, lr, config.momentum, 0.0)
        state.step += 1
        breakdowns.append(bd)
        if log_rows is not None:
            log_rows.append((state.step, state.epoch) + bd.csv_values())
    state.epoch += 1
    return breakdowns


def fit(net: network.MultiExitNetwork, train_set: Dataset, test_set: Dataset,
        config: TrainConfig, out_dir=None, state: Optional[TrainState] = None,
        log_rows: Optional[list] = None, quiet: bool = True) -> dict:
    """Train, evaluating per-classifier test accuracy each epoch.

    Checkpoints the best epoch by final-classifier accuracy (plus the
    latest state for resuming) when out_dir is given.  Returns the
    report: one accuracy row per evaluated epoch.
    """
    config = config.resolved(train_set.num_classes)
    if state is None:
        state = TrainState.fresh(config.seed)
    aug = AugmentConfig.for_dataset(train_set)
    ckpt_dir = None
    if out_dir is not None:
        import os

        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)

    per_epoch = []

    def evaluate(epoch_label) -> list[float]:
        accs = runtime.evaluate_per_classifier(net, test_set, aug)
        per_epoch.append({"epoch": epoch_label, "lr": config.lr_at(max(epoch_label, 0)),
                          "accuracy": [round(a, 6) for a in accs]})
        return accs

    if config.epochs == 0:
        evaluate(-1)

    while state.epoch < config.epochs:
        train_epoch(state, net, train_set, config, aug, log_rows)
        accs = evaluate(state.epoch - 1)
        if not quiet:
            print(f"epoch {state.epoch - 1}: " + " ".join(f"{a:.4f}" for a in accs))
        if state.best_acc is None or accs[-1] > state.best_acc[-1]:
            state.best_acc = list(accs)
            state.best_epoch = state.epoch - 1
            if ckpt_dir is not None:
                save_checkpoint(f"{ckpt_dir}/best.ckpt", net, state, config)
        if ckpt_dir is not None:
            save_checkpoint(f"{ckpt_dir}/last.ckpt", net, state, config)

    return {
        "mode": config.mode,
        "num_classifiers": net.num_classifiers,
        "per_epoch": per_epoch,
        "best": {"epoch": state.best_epoch,
                 "accuracy": [round(a, 6) for a in (state.best_acc or [])]},
        "final": per_epoch[-1] if per_epoch else None,
    }


# ---------------------------------------------------------------------------
# checkpointing


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {k: str(v) for k, v in st["state"].items()},
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def _rng_state_from_json(d: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = {
        "bit_generator": d["bit_generator"],
        "state": {k: int(v) for k, v in d["state"].items()},
        "has_uint32": int(d["has_uint32"]), "uinteger": int(d["uinteger"]),
    }
    return rng


def save_checkpoint(path, net: network.MultiExitNetwork, state: Optional[TrainState] = None,
                    config: Optional[TrainConfig] = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in net.named_parameters().items():
        tensors[f"param:{name}"] = p.data
    for name, b in net.named_buffers().items():
        tensors[f"buffer:{name}"] = b
    meta = {"arch": net.to_arch_config(), "input_hw": list(net.input_hw),
            "arch_digest": net.arch_digest()}
    if state is not None:
        for name, v in state.momentum.items():
            tensors[f"momentum:{name}"] = v
        meta["state"] = {"epoch": state.epoch, "step": state.step,
                         "rng": _rng_state_to_json(state.rng),
                         "best_acc": state.best_acc, "best_epoch": state.best_epoch}
    if config is not None:
        meta["train_config"] = config.to_dict()
    serialize.save_checkpoint(path, tensors, meta)


def load_checkpoint(path, dtype=np.float32):
    """Rebuild (net, state, config_dict, meta) from a checkpoint file."""
    tensors, meta = serialize.load_checkpoint(path)
    net = network.build_from_config(meta["arch"], seed=0, dtype=dtype,
                                    input_hw=tuple(meta.get("input_hw", (32, 32))))
    params = net.named_parameters()
    for name, p in params.items():
        key = f"param:{name}"
        if key not in tensors:
            raise serialize.FormatError(f"checkpoint missing parameter {name}")
        if tensors[key].shape != p.data.shape:
            raise serialize.FormatError(f"checkpoint parameter {name} has shape "
                                        f"{tensors[key].shape}, expected {p.data.shape}")
        p.data[...] = tensors[key].astype(dtype, copy=False)
    for name, b in net.named_buffers().items():
        key = f"buffer:{name}"
        if key in tensors:
            b[...] = tensors[key].astype(dtype, copy=False)
    state = None
    if "state" in meta:
        s = meta["state"]
        state = TrainState(epoch=s["epoch"], step=s["step"],
                           rng=_rng_state_from_json(s["rng"]),
                           best_acc=s.get("best_acc"), best_epoch=s.get("best_epoch", -1))
        for key, v in tensors.items():
            if key.startswith("momentum:"):
                state.momentum[key[len("momentum:"):]] = v.astype(dtype, copy=False).copy()
    config = meta.get("train_config")
    return net, state, config, meta
