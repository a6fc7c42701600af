"""The two training phases.

Phase 1 (labelled): each epoch walks the branches in order and trains
every branch, together with the shared trunk, on its own random portion
of the labelled samples, each presentation freshly augmented, against
one-hot targets.

Phase 2 (unlabelled): per minibatch the clean images are first pushed
through the whole ensemble in inference mode, the branch decisions are
counted into votes and softened into a target distribution, then a
training-mode pass over all branches takes one SGD step on the mean of
the branch losses. The phase-2 learning rate must stay strictly below
phase 1's, otherwise previously learned classes degrade.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, random_augment
from .metrics import evaluate
from .model import ensemble_vote_batch, soft_target
from .numerics import SGD, cross_entropy_soft


class TrainerError(ValueError):
    pass


@dataclass
class Phase1Config:
    epochs: int = 50
    batch_size: int = 32
    portion: float = 0.5          # fraction of the labelled set per branch per epoch
    base_lr: float = 0.001
    decay: float = 1e-5
    momentum: float = 0.9
    seed: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.portion <= 1.0:
            raise ValueError("portion must be in (0, 1]")


@dataclass
class Phase2Config:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.0001
    decay: float = 2e-5
    momentum: float = 0.9
    seed: int = 2

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class CurveLog:
    """Append-only (epoch, set, rate) rows plus run metadata."""
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, epoch, set_name, rate):
        self.rows.append((int(epoch), set_name, float(rate)))

    def rate(self, epoch, set_name):
        for e, s, r in self.rows:
            if e == epoch and s == set_name:
                return r
        raise KeyError((epoch, set_name))

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("epoch,set,rate\n")
            for e, s, r in self.rows:
                fh.write(f"{e},{s},{r:.6f}\n")


def _one_hot(labels, num_classes, dtype):
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _sample_rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def phase1_epoch(net, labelled, config, epoch, optimizer=None, augment_cfg=None):
    """One supervised epoch; returns per-branch mean losses.

    Branch b draws ceil(portion * |labelled|) samples without replacement
    (an independent draw per branch), augments each presentation, and is
    updated together with the trunk; the other branches stay untouched.
    """
    if len(labelled) == 0:
        raise TrainerError("labelled dataset is empty")
    if any(s.label is None for s in labelled):
        raise TrainerError("phase 1 requires every sample to be labelled")
    optimizer = optimizer or SGD(config.base_lr, config.decay, config.momentum)
    augment_cfg = augment_cfg or AugmentConfig()
    n = len(labelled)
    take = math.ceil(config.portion * n)
    k = net.config.num_classes
    losses = []
    for b in range(len(net.branches)):
        rng_draw = _sample_rng(config.seed, epoch, b)
        chosen = rng_draw.choice(n, size=take, replace=False)
        batch_losses = []
        for start in range(0, take, config.batch_size):
            idx = chosen[start:start + config.batch_size]
            images = []
            for i in idx:
                rng_aug = _sample_rng(config.seed, epoch, b, int(i), 7)
                images.append(random_augment(labelled[int(i)].image, augment_cfg, rng_aug))
            x = np.stack(images)
            y = _one_hot([labelled[int(i)].label for i in idx], k, net.dtype)
            net.forward_branch(b, x, train=True)
            batch_losses.append(net.branches[b].softmax.loss(y))
            net.backward_branch(b, y)
            grads = net.named_grads(branches=[b])
            optimizer.step(net.named_params(branches=[b]), grads)
        losses.append(float(np.mean(batch_losses)))
    return {"branch_losses": losses, "steps": optimizer.step_count}


def run_phase1(net, labelled, val, config, augment_cfg=None, verbose=True):
    """Train for the configured epochs; returns (net at the best-validation
    checkpoint, curve log). Ties keep the earliest epoch."""
    curve = CurveLog(metadata={"phase": 1, "seed": config.seed,
                               "net_seed": net.rng_seed})
    optimizer = SGD(config.base_lr, config.decay, config.momentum)
    best_rate, best_state = -1.0, None
    for epoch in range(1, config.epochs + 1):
        stats = phase1_epoch(net, labelled, config, epoch, optimizer, augment_cfg)
        _, train_rate = evaluate(net, labelled, mode="ensemble",
                                 batch_size=config.batch_size)
        _, val_rate = evaluate(net, val, mode="ensemble",
                               batch_size=config.batch_size)
        curve.add(epoch, "train", train_rate)
        curve.add(epoch, "val", val_rate)
        if val_rate > best_rate:
            best_rate, best_state = val_rate, net.state_dict()
        if verbose:
            loss = float(np.mean(stats["branch_losses"]))
            print(f"phase1 epoch {epoch:3d}  loss {loss:.4f}  "
                  f"train {train_rate:6.2f}  val {val_rate:6.2f}")
    if best_state is not None:
        net.load_state_dict(best_state)
    return net, curve


def phase2_epoch(net, unlabelled, config, epoch, optimizer=None):
    """One self-training epoch on unlabelled samples; returns mean loss.

    Targets are rebuilt per minibatch from the current ensemble votes in
    inference mode before the parameter update of that same minibatch.
    """
    if len(unlabelled) == 0:
        raise TrainerError("unlabelled dataset is empty")
    optimizer = optimizer or SGD(config.base_lr, config.decay, config.momentum)
    order = _sample_rng(config.seed, epoch).permutation(len(unlabelled))
    n_branches = len(net.branches)
    temperature = net.config.vote_temperature
    batch_losses = []
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        x = np.stack([unlabelled[int(i)].image for i in idx])
        clean_probs = net.forward_all(x, train=False)
        counts = ensemble_vote_batch(clean_probs)
        targets = soft_target(counts, temperature).astype(net.dtype)
        train_probs = net.forward_all(x, train=True)
        loss = float(np.mean([cross_entropy_soft(train_probs[b], targets)
                              for b in range(n_branches)]))
        batch_losses.append(loss)
        net.backward_all(targets)
        optimizer.step(net.named_params(), net.named_grads())
    return {"loss": float(np.mean(batch_losses)), "steps": optimizer.step_count}


def run_phase2(net, unlabelled, eval_sets, config, verbose=True):
    """Retrain on unlabelled data, logging the recognition rate on every
    eval set per epoch. Epoch 0 rows hold the pre-retraining rates."""
    curve = CurveLog(metadata={"phase": 2, "seed": config.seed})
    for name, ds in eval_sets.items():
        _, rate = evaluate(net, ds, mode="ensemble", batch_size=config.batch_size)
        curve.add(0, name, rate)
    optimizer = SGD(config.base_lr, config.decay, config.momentum)
    for epoch in range(1, config.epochs + 1):
        stats = phase2_epoch(net, unlabelled, config, epoch, optimizer)
        line = [f"phase2 epoch {epoch:3d}  loss {stats['loss']:.4f}"]
        for name, ds in eval_sets.items():
            _, rate = evaluate(net, ds, mode="ensemble", batch_size=config.batch_size)
            curve.add(epoch, name, rate)
            line.append(f"{name} {rate:6.2f}")
        if verbose:
            print("  ".join(line))
    return net, curve
