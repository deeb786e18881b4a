"""Contrastive pair training over a shared-weight embedding network.

Each step stacks both members of every pair into one batch and runs a single
forward/backward pass, so batch normalization sees the combined statistics
and both branches read and update the same parameter store by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .imaging import LabeledImage, image_to_tensor
from .layers import F32, F64, l2_distance
from .network import (
    Network,
    NetworkSpec,
    backward_network,
    build_network,
    forward_network,
    parameter_entries,
)
from .rngstreams import TAG_DROPOUT, TAG_PAIRS, rng_stream


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 20
    pairs_per_epoch: int = 512
    same_pair_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValidationError("margin must be > 0")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValidationError("adam betas must be in [0, 1)")
        if not self.adam_epsilon > 0:
            raise ValidationError("adam_epsilon must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.pairs_per_epoch < self.batch_size:
            raise ValidationError("pairs_per_epoch must be >= batch_size")
        if not 0.0 <= self.same_pair_fraction <= 1.0:
            raise ValidationError("same_pair_fraction must be in [0, 1]")


@dataclass(frozen=True)
class ImagePair:
    first: LabeledImage
    second: LabeledImage
    same_label: bool


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


@dataclass
class TrainHistory:
    mean_loss: list[float] = field(default_factory=list)
    mean_same_dist: list[float] = field(default_factory=list)
    mean_diff_dist: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "mean_same_dist", "mean_diff_dist"])
            for i in range(len(self.mean_loss)):
                writer.writerow(
                    [
                        i,
                        repr(self.mean_loss[i]),
                        repr(self.mean_same_dist[i]),
                        repr(self.mean_diff_dist[i]),
                    ]
                )


def contrastive_loss(
    e1: np.ndarray, e2: np.ndarray, same_label: bool, margin: float = 1.0
) -> float:
    """Half squared distance for same-label pairs, half squared hinge otherwise."""
    if not margin > 0:
        raise ValidationError("margin must be > 0")
    d = l2_distance(e1, e2)
    if same_label:
        return 0.5 * d * d
    gap = margin - d
    return 0.5 * gap * gap if gap > 0 else 0.0


def contrastive_loss_grad(
    e1: np.ndarray, e2: np.ndarray, same_label: bool, margin: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of contrastive_loss w.r.t. both embeddings.

    For different-label pairs at distance zero the true gradient is undefined;
    zero is returned as the chosen subgradient. At or beyond the margin the
    hinge is flat and the gradient is exactly zero.
    """
    if not margin > 0:
        raise ValidationError("margin must be > 0")
    a = np.asarray(e1, dtype=F32).astype(F64)
    b = np.asarray(e2, dtype=F32).astype(F64)
    if a.shape != b.shape:
        raise ShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    if same_label:
        g1 = diff
    else:
        d = float(np.sqrt(np.dot(diff.ravel(), diff.ravel())))
        if d >= margin or d == 0.0:
            g1 = np.zeros_like(diff)
        else:
            g1 = -((margin - d) / d) * diff
    g1 = g1.astype(F32)
    return g1, -g1


def sample_pairs(
    dataset: list[LabeledImage],
    count: int,
    same_fraction: float,
    rng: np.random.Generator,
) -> list[ImagePair]:
    """Draw pairs with exactly round(count * same_fraction) same-label pairs.

    Same pairs: a uniform class with >= 2 members, then two distinct members.
    Different pairs: a uniform unordered class pair, then one member of each,
    so every class combination is equally likely regardless of class sizes.
    """
    if count < 0:
        raise ValidationError("pair count must be >= 0")
    if not 0.0 <= same_fraction <= 1.0:
        raise ValidationError("same_fraction must be in [0, 1]")
    n_same = int(round(count * same_fraction))
    n_diff = count - n_same

    by_label: dict[int, list[LabeledImage]] = {}
    for item in dataset:
        by_label.setdefault(item.label, []).append(item)
    labels = sorted(by_label)
    rich = [lab for lab in labels if len(by_label[lab]) >= 2]
    if n_same > 0 and not rich:
        raise ValidationError("same pairs requested but no class has two members")
    if n_diff > 0 and len(labels) < 2:
        raise ValidationError("different pairs requested but fewer than two classes exist")

    pairs: list[ImagePair] = []
    for _ in range(n_same):
        lab = rich[int(rng.integers(len(rich)))]
        members = by_label[lab]
        i, j = rng.choice(len(members), size=2, replace=False)
        pairs.append(ImagePair(members[int(i)], members[int(j)], True))
    for _ in range(n_diff):
        ia, ib = rng.choice(len(labels), size=2, replace=False)
        la, lb = labels[int(ia)], labels[int(ib)]
        first = by_label[la][int(rng.integers(len(by_label[la])))]
        second = by_label[lb][int(rng.integers(len(by_label[lb])))]
        pairs.append(ImagePair(first, second, False))
    order = rng.permutation(len(pairs))
    return [pairs[int(i)] for i in order]


def init_adam_state(params: list[np.ndarray]) -> AdamState:
    return AdamState(
        m=[np.zeros(p.shape, dtype=F64) for p in params],
        v=[np.zeros(p.shape, dtype=F64) for p in params],
        t=0,
    )


def adam_update(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> None:
    """One bias-corrected Adam step, in place. Moments are kept in float64."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValidationError("params, grads, and state must have equal lengths")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param {p.shape}")
        g64 = g.astype(F64)
        m *= beta1
        m += (1.0 - beta1) * g64
        v *= beta2
        v += (1.0 - beta2) * (g64 * g64)
        step = learning_rate * (m / bc1) / (np.sqrt(v / bc2) + epsilon)
        p -= step.astype(p.dtype)


def _stack_pairs(pairs: list[ImagePair]) -> np.ndarray:
    tensors = [image_to_tensor(p.first.image) for p in pairs]
    tensors += [image_to_tensor(p.second.image) for p in pairs]
    return np.stack(tensors)


def train(
    dataset: list[LabeledImage], spec: NetworkSpec, config: TrainConfig
) -> tuple[Network, TrainHistory]:
    """Train a fresh network on contrastive pairs; deterministic in the seed."""
    net = build_network(spec, config.seed)
    history = TrainHistory()
    if config.epochs == 0:
        return net, history
    if not dataset:
        raise ValidationError("dataset is empty")

    entries = parameter_entries(net)
    params = [arr for _, _, arr in entries]
    adam = init_adam_state(params)
    steps_per_epoch = config.pairs_per_epoch // config.batch_size
    b = config.batch_size

    for epoch in range(config.epochs):
        pair_rng = rng_stream(config.seed, TAG_PAIRS, epoch)
        pairs = sample_pairs(
            dataset, steps_per_epoch * b, config.same_pair_fraction, pair_rng
        )
        losses: list[float] = []
        same_d: list[float] = []
        diff_d: list[float] = []
        for step in range(steps_per_epoch):
            batch = pairs[step * b : (step + 1) * b]
            x = _stack_pairs(batch)
            drop_rng = rng_stream(config.seed, TAG_DROPOUT, epoch, step)
            emb = forward_network(net, x, mode="train", rng=drop_rng)
            grad_emb = np.zeros_like(emb)
            for i, pair in enumerate(batch):
                e1, e2 = emb[i], emb[b + i]
                losses.append(
                    contrastive_loss(e1, e2, pair.same_label, config.margin)
                )
                g1, g2 = contrastive_loss_grad(
                    e1, e2, pair.same_label, config.margin
                )
                grad_emb[i] = g1 / b
                grad_emb[b + i] = g2 / b
                d = l2_distance(e1, e2)
                (same_d if pair.same_label else diff_d).append(d)
            grads = backward_network(net, grad_emb)
            adam_update(
                params,
                grads,
                adam,
                learning_rate=config.learning_rate,
                beta1=config.adam_beta1,
                beta2=config.adam_beta2,
                epsilon=config.adam_epsilon,
            )
        history.mean_loss.append(float(np.mean(losses)))
        history.mean_same_dist.append(float(np.mean(same_d)) if same_d else 0.0)
        history.mean_diff_dist.append(float(np.mean(diff_d)) if diff_d else 0.0)
    return net, history
