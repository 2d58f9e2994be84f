"""Training and pruning schedules.

Seeding: every batch shuffle draws from PCG64 seeded by
SeedSequence([master_seed, phase, epoch]), where phase 0 is model init,
phase 1 the baseline run, and phase 2+i the i-th retraining phase. Two
runs with the same master seed and backend are bitwise identical.

The iterative schedule probes increasing cumulative prune fractions.
After each prune+retrain it keeps the result if test accuracy stays
within epsilon accuracy points of the baseline, otherwise it rolls the
model back to the last accepted state and stops. Optimizer velocity
starts at zero in every retraining phase; it is not carried across
phases or checkpoints.
"""

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import pruning
from .data import batch_iter
from .tensor import SGD, Tape, softmax_cross_entropy

PHASE_INIT = 0
PHASE_BASELINE = 1
PHASE_RETRAIN = 2  # retrain phase i uses PHASE_RETRAIN + i


def derive_seed(master_seed, phase, epoch=0):
    """Fold (master, phase, epoch) into one PCG64 seed, order-sensitive."""
    ss = np.random.SeedSequence([int(master_seed), int(phase), int(epoch)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class ScheduleConfig:
    variant: str = "global-structured"
    p_start: float = 0.5
    p_step: float = 0.05
    p_max: float = 0.98
    epsilon: float = 0.3  # tolerated accuracy drop, in percentage points
    epochs: int = 20
    retrain_epochs: int = 4
    base_lr: float = 0.01
    retrain_lr: float = 0.005
    lr_decay_epoch: int = 15
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    master_seed: int = 0

    def validate(self):
        if self.variant not in pruning.VARIANTS:
            raise ValueError(
                f"unknown variant {self.variant!r}; expected one of {pruning.VARIANTS}"
            )
        if not (0.0 <= self.p_start <= self.p_max <= 1.0):
            raise ValueError(
                f"need 0 <= p_start <= p_max <= 1, got p_start={self.p_start} "
                f"p_max={self.p_max}"
            )
        if self.p_step <= 0.0:
            raise ValueError(f"p_step must be positive, got {self.p_step}")
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        for name in ("epochs", "retrain_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        return self


@dataclass
class LayerSnapshot:
    layer_id: int
    name: str
    unit_fraction: float  # fraction of units masked
    mean_abs_weight: float  # mean |w| over unmasked weight entries


@dataclass
class IterationRecord:
    iteration: int
    cumulative_p: float
    pre_retrain_accuracy: float
    post_retrain_accuracy: float
    unmasked_params: int
    accepted: bool
    layers: list


@dataclass
class RunHistory:
    """Everything the reports need about one schedule run."""

    variant: str
    baseline_accuracy: float
    baseline_layers: list = field(default_factory=list)
    records: list = field(default_factory=list)
    final_iteration: int = -1  # index of the last accepted record
    flagged: bool = False  # true when even p_start failed the tolerance

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["baseline_layers"] = [LayerSnapshot(**s) for s in d["baseline_layers"]]
        d["records"] = [
            IterationRecord(**{**r, "layers": [LayerSnapshot(**s) for s in r["layers"]]})
            for r in d["records"]
        ]
        return cls(**d)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def layer_snapshots(model):
    """Per trainable layer: masked-unit fraction and mean |w| of live weights.

    The classifier is included: its unit fraction stays 0 but its live
    weights shrink in count as the preceding layer is pruned.
    """
    out = []
    for spec in model.trainable_specs():
        unit_mask = model.masks.unit(spec.id)
        w = model.params[spec.id]["weight"].data
        wmask = model.masks.for_param(spec.id, "weight")
        live = w[wmask]
        out.append(
            LayerSnapshot(
                layer_id=spec.id,
                name=spec.name,
                unit_fraction=1.0 - float(unit_mask.sum()) / spec.unit_count,
                mean_abs_weight=float(np.abs(live).mean()) if live.size else 0.0,
            )
        )
    return out


def evaluate(model, dataset, batch_size=512):
    """Top-1 accuracy as a fraction in [0, 1]."""
    hits = 0
    n = len(dataset)
    for start in range(0, n, batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        logits = model.forward(images)
        hits += int((logits.data.argmax(axis=1) == labels).sum())
    return hits / n


def _run_epoch(model, opt, train_ds, cfg, lr, seed):
    """One pass over the training set; returns the mean minibatch loss."""
    masks = model.parameter_masks()
    opt.lr = lr
    losses = []
    for bi, (images, labels) in enumerate(batch_iter(train_ds, cfg.batch_size, seed)):
        model.zero_grads()
        tape = Tape()
        with tape:
            logits = model.forward(images)
            loss = softmax_cross_entropy(logits, labels)
        if not math.isfinite(loss.data.item()):
            raise ArithmeticError(
                f"training diverged: loss={loss.data.item()} at batch {bi}"
            )
        tape.backward(loss)
        opt.step(masks)
        losses.append(loss.data.item())
    return float(np.mean(losses))


def _train_phase(model, train_ds, cfg, phase, epochs, lr_fn, progress=None):
    opt = SGD([t for _, t in model.parameters()], lr=0.0, momentum=cfg.momentum)
    stats = []
    for epoch in range(epochs):
        seed = derive_seed(cfg.master_seed, phase, epoch)
        loss = _run_epoch(model, opt, train_ds, cfg, lr_fn(epoch), seed)
        stats.append(loss)
        if progress is not None:
            progress({"event": "epoch", "phase": phase, "epoch": epoch, "mean_loss": loss})
    return stats


def train_baseline(model, train_ds, test_ds, cfg, progress=None):
    """Train from scratch, keep the best-by-test-accuracy epoch's weights.

    Returns (best_accuracy, per_epoch_accuracies). The model ends holding
    the best epoch's parameters, not the last epoch's.
    """
    cfg.validate()

    def lr_fn(epoch):
        if epoch >= cfg.lr_decay_epoch:
            return cfg.base_lr * cfg.lr_decay_factor
        return cfg.base_lr

    opt = SGD([t for _, t in model.parameters()], lr=0.0, momentum=cfg.momentum)
    best_acc = -1.0
    best_params = None
    accs = []
    for epoch in range(cfg.epochs):
        seed = derive_seed(cfg.master_seed, PHASE_BASELINE, epoch)
        loss = _run_epoch(model, opt, train_ds, cfg, lr_fn(epoch), seed)
        acc = evaluate(model, test_ds)
        accs.append(acc)
        if acc > best_acc:
            best_acc = acc
            best_params = {
                lid: {k: t.data.copy() for k, t in per.items()}
                for lid, per in model.params.items()
            }
        if progress is not None:
            progress(
                {
                    "event": "epoch",
                    "phase": PHASE_BASELINE,
                    "epoch": epoch,
                    "mean_loss": loss,
                    "test_accuracy": acc,
                }
            )
    for lid, per in best_params.items():
        for k, arr in per.items():
            model.params[lid][k].data[...] = arr
    return best_acc, accs


def _retrain(model, train_ds, cfg, iteration, progress=None):
    _train_phase(
        model, train_ds, cfg, PHASE_RETRAIN + iteration, cfg.retrain_epochs,
        lambda _e: cfg.retrain_lr, progress,
    )


def _record(model, it, p, pre, post, accepted):
    return IterationRecord(
        iteration=it,
        cumulative_p=p,
        pre_retrain_accuracy=pre,
        post_retrain_accuracy=post,
        unmasked_params=model.param_count("unmasked"),
        accepted=accepted,
        layers=layer_snapshots(model),
    )


def iterative_prune(model, train_ds, test_ds, cfg, baseline_accuracy=None,
                    progress=None, checkpoint_dir=None):
    """Prune-retrain loop with rollback; returns (model, RunHistory).

    Each iteration prunes to cumulative fraction p, retrains, and checks
    test accuracy against baseline - epsilon (epsilon in accuracy
    points). On failure the model reverts to the last accepted state and
    the loop ends. If the very first fraction fails, the returned model
    is the unpruned baseline and the history is flagged.
    """
    cfg.validate()
    if baseline_accuracy is None:
        baseline_accuracy = evaluate(model, test_ds)
    history = RunHistory(
        variant=cfg.variant,
        baseline_accuracy=baseline_accuracy,
        baseline_layers=layer_snapshots(model),
    )
    floor_acc = baseline_accuracy - cfg.epsilon / 100.0
    good = model.clone()
    p = cfg.p_start
    it = 0
    while True:
        plan = pruning.make_plan(model, cfg.variant, p)
        pruning.apply_plan(model, plan)
        pre = evaluate(model, test_ds)
        _retrain(model, train_ds, cfg, it, progress)
        post = evaluate(model, test_ds)
        accepted = post >= floor_acc
        history.records.append(_record(model, it, p, pre, post, accepted))
        if progress is not None:
            progress(
                {
                    "event": "iteration",
                    "iteration": it,
                    "cumulative_p": p,
                    "pre_retrain_accuracy": pre,
                    "post_retrain_accuracy": post,
                    "accepted": accepted,
                }
            )
        if not accepted:
            model = good
            history.flagged = history.final_iteration < 0
            break
        history.final_iteration = len(history.records) - 1
        good = model.clone()
        if checkpoint_dir is not None:
            from .checkpoint import save_checkpoint

            save_checkpoint(
                model,
                {
                    "variant": cfg.variant,
                    "cumulative_p": p,
                    "iteration": it,
                    "post_retrain_accuracy": post,
                    "master_seed": cfg.master_seed,
                },
                Path(checkpoint_dir) / f"iter{it:02d}.ckpt",
            )
        if p >= cfg.p_max:
            break
        p = min(p + cfg.p_step, cfg.p_max)
        it += 1
    return model, history


def oneshot_prune(model, train_ds, test_ds, p, cfg, baseline_accuracy=None,
                  progress=None):
    """Single prune at fraction p plus one retraining phase, no rollback."""
    cfg.validate()
    if baseline_accuracy is None:
        baseline_accuracy = evaluate(model, test_ds)
    history = RunHistory(
        variant=cfg.variant,
        baseline_accuracy=baseline_accuracy,
        baseline_layers=layer_snapshots(model),
    )
    plan = pruning.make_plan(model, cfg.variant, p)
    pruning.apply_plan(model, plan)
    pre = evaluate(model, test_ds)
    _retrain(model, train_ds, cfg, 0, progress)
    post = evaluate(model, test_ds)
    accepted = post >= baseline_accuracy - cfg.epsilon / 100.0
    history.records.append(_record(model, 0, float(p), pre, post, accepted))
    history.final_iteration = 0
    return model, history
