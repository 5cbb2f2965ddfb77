"""
This module trains the multi-headed network: AdamW with separate encoder and
head learning rates, linear warmup followed by cosine annealing, global
gradient norm clipping, the masked sample loss balanced across heads by
Dynamic Weight Averaging, and checkpointing on the best validation loss.

Training is deterministic given the seed: the batch order of each epoch comes
from a generator seeded with ``(seed, epoch)``.

>>> cfg = config.load_config("train.json", TrainConfig)
>>> result = train(dataset.load_samples("data", "train"), dataset.load_samples("data", "val"), cfg, "ckpt")
"""

import json
import logging
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

import config
import mtl
import net
from errors import ConfigError, EmptyInputError, NonFiniteGradientError
from targets import HEAD_ORDER, HEADS, NUM_TARGETS

logger = logging.getLogger(__name__)

LOG_FILE = "train_log.jsonl"

CHECKPOINT_POLICIES = ("best_val", "last")
GROUPS = ("encoder", "heads")

# stream ids mixed into the seed
_INIT, _EPOCH, _POINTS = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization and architecture settings, serialized as ``train.json``.
    ``clip_norm`` None disables clipping. ``points_per_sample`` caps the
    points fed to the encoder per scan (None feeds them all).
    """
    epochs: int = 150
    batch_size: int = 6
    lr_encoder: float = 5e-5
    lr_heads: float = 1e-4
    warmup_epochs: int = 10
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    dwa: bool = True
    n_h_mode: str = "labeled"
    huber_delta: float = 1.0
    epsilon: float = 1e-8
    temperature: float = 2.0
    encoder_dims: tuple = net.REFERENCE_DIMS
    head_hidden: tuple = net.HEAD_HIDDEN
    dropout: float = net.DROPOUT
    heads: tuple = HEAD_ORDER
    points_per_sample: int = 4096
    checkpoint_policy: str = "best_val"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (self.lr_encoder > 0 and self.lr_heads > 0):
            raise ConfigError("learning rates must be > 0")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(f"warmup_epochs must be in [0, {self.epochs}], got {self.warmup_epochs}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0 or null")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if not self.heads or any(h not in HEADS for h in self.heads):
            raise ConfigError(f"heads must be a non-empty subset of {HEAD_ORDER}, got {self.heads}")
        if self.points_per_sample is not None and self.points_per_sample < 1:
            raise ConfigError("points_per_sample must be >= 1 or null")
        if self.checkpoint_policy not in CHECKPOINT_POLICIES:
            raise ConfigError(f"checkpoint_policy must be one of {CHECKPOINT_POLICIES}")
        self.loss_config()

    def loss_config(self):
        return mtl.LossConfig(self.huber_delta, self.epsilon, self.temperature, self.n_h_mode)

    def build_model(self):
        encoder = net.PointMlpEncoder(self.encoder_dims)
        return net.MultiHeadNet(encoder, self.heads, self.head_hidden, self.dropout)


### schedule and optimizer ###

def lr_schedule(t, cfg, group):
    """
    Learning rate at epoch ``t``: a linear ramp from 0 to the base rate over
    the warmup epochs, then cosine annealing down to 0 at ``t = epochs``.

    :param t: the epoch, from 0 to ``cfg.epochs``
    :type t: float

    :param cfg: the training settings
    :type cfg: TrainConfig

    :param group: ``"encoder"`` or ``"heads"``
    :type group: str

    :rtype: float

    >>> lr_schedule(10, TrainConfig(), "heads")
    0.0001
    """
    base = cfg.lr_encoder if group == "encoder" else cfg.lr_heads
    if t < cfg.warmup_epochs:
        return base * t / cfg.warmup_epochs
    if cfg.epochs == cfg.warmup_epochs:
        return base
    progress = (t - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return base * 0.5 * (1.0 + np.cos(np.pi * min(progress, 1.0)))


def step_time(epoch, step, n_steps):
    """
    Position of an optimizer step on the epoch axis of :func:`lr_schedule`:
    the midpoint of the step inside its 1-based epoch, so no update runs at
    a rate of 0.

    >>> step_time(1, 0, 2)
    0.25
    """
    return epoch - 1 + (step + 0.5) / n_steps


def param_group(name):
    return "encoder" if name.startswith("encoder.") else "heads"


@dataclass
class AdamState:
    """
    First and second moments of every parameter block and the step count.
    """
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def check_finite(grads):
    """
    :raises NonFiniteGradientError: naming the first block with a NaN or Inf
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)


def optimizer_step(params, grads, state, lr, weight_decay, clip_norm=None,
                   betas=(0.9, 0.999), eps=1e-8):
    """
    One AdamW step, in place: gradients are clipped to a global norm of
    ``clip_norm``, the bias-corrected moment update is applied, then the
    weights decay by ``lr * weight_decay``.

    :param params: the parameter blocks, updated in place
    :type params: {str : numpy.ndarray}

    :param grads: the gradient blocks
    :type grads: {str : numpy.ndarray}

    :param state: the moments, updated in place
    :type state: AdamState

    :param lr: the learning rate, or a function from block name to rate
    :type lr: float

    :return: the gradient norm before clipping
    :rtype: float
    """
    check_finite(grads)
    norm = global_norm(grads)
    scale = clip_norm / norm if clip_norm is not None and norm > clip_norm else 1.0
    if scale < 1.0:
        logger.debug("Clipped gradient norm %.4g to %.4g", norm, clip_norm)

    beta1, beta2 = betas
    state.t += 1
    correction = np.sqrt(1 - beta2 ** state.t) / (1 - beta1 ** state.t)
    for name, p in params.items():
        g = grads[name] * scale
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        rate = lr(name) if callable(lr) else lr
        p -= rate * correction * m / (np.sqrt(v) + eps)
        p -= rate * weight_decay * p
    return norm


### loss ###

def batch_loss(model, params, inputs, y, mask, weights, loss_cfg, train=False, rng=None):
    """
    Total loss of a batch and the gradients of every parameter block.

    :param inputs: the prepared ``N_i x 6`` input of each sample
    :type inputs: list

    :param y: normalized targets, ``B x 10``
    :type y: numpy.ndarray

    :param mask: presence bits, ``B x 10``
    :type mask: numpy.ndarray

    :param weights: head weights keyed by head name
    :type weights: {str : float}

    :return: the total loss, the per-head batch means, the labeled flags and
        per-sample losses of each head, and the gradients
    :rtype: (float, dict, dict, dict, dict)
    """
    outputs, cache = model.forward(params, inputs, train, rng)
    losses, labeled, dpreds = {}, {}, {}
    for name in model.head_names:
        head = HEADS[name]
        losses[name] = mtl.masked_sample_loss(outputs[name], y, mask, head, loss_cfg)
        labeled[name] = mask[:, list(head.targets)].any(axis=1)
        dpreds[name] = mtl.masked_sample_loss_grad(outputs[name], y, mask, head, loss_cfg)

    total, means = mtl.total_loss(losses, labeled, weights, loss_cfg.n_h_mode)
    dl = mtl.total_loss_grad(labeled, weights, loss_cfg.n_h_mode)
    douts = {name: dl[name][:, None] * dpreds[name] for name in model.head_names}
    return total, means, labeled, losses, model.backward(params, cache, douts)


def sample_input(sample, cfg, *stream):
    """
    The encoder input of one sample: at most ``points_per_sample`` of its
    points, drawn with a generator seeded by ``(seed, *stream, id)``.
    """
    points = sample.cloud.points
    n = cfg.points_per_sample
    if n is not None and len(points) > n:
        rng = np.random.default_rng([cfg.seed, *stream, zlib.crc32(sample.sample_id.encode("utf-8"))])
        points = points[np.sort(rng.choice(len(points), size=n, replace=False))]
    return net.prepare_input(points)


def stack_targets(samples, normalizer):
    y = np.stack([s.target.y for s in samples])
    mask = np.stack([s.target.mask for s in samples])
    return normalizer.normalize(y, mask), mask


def validation_loss(model, params, samples, normalizer, cfg):
    """
    Total loss over ``samples`` in evaluation mode with uniform head weights.
    """
    loss_cfg = cfg.loss_config()
    sums = {h: 0.0 for h in model.head_names}
    counts = {h: 0 for h in model.head_names}
    for start in range(0, len(samples), cfg.batch_size):
        batch = samples[start:start + cfg.batch_size]
        inputs = [sample_input(s, cfg, _POINTS) for s in batch]
        y, mask = stack_targets(batch, normalizer)
        outputs, _ = model.forward(params, inputs)
        for name in model.head_names:
            head = HEADS[name]
            sums[name] += float(np.sum(mtl.masked_sample_loss(outputs[name], y, mask, head, loss_cfg)))
            counts[name] += mtl.head_counts(mask[:, list(head.targets)].any(axis=1), cfg.n_h_mode)
    return sum(sums[h] / counts[h] for h in model.head_names if counts[h])


### training ###

@dataclass
class TrainResult:
    model: net.MultiHeadNet
    params: dict
    normalizer: mtl.Normalizer
    log: list
    best_epoch: int


def train(train_samples, val_samples, cfg, out_dir=None):
    """
    Fits the model on ``train_samples``. The normalizer is fitted on the
    training targets only; validation samples only select the checkpoint.

    :param train_samples: the training split
    :type train_samples: list

    :param val_samples: the validation split, possibly empty
    :type val_samples: list

    :param cfg: the training settings
    :type cfg: TrainConfig

    :param out_dir: where to write the checkpoint and the JSON-lines log
    :type out_dir: str

    :rtype: TrainResult

    :raises EmptyInputError: if there are no training samples
    """
    if not train_samples:
        raise EmptyInputError("cannot train on an empty dataset")
    train_samples = sorted(train_samples, key=lambda s: s.sample_id)
    val_samples = sorted(val_samples, key=lambda s: s.sample_id)

    loss_cfg = cfg.loss_config()
    normalizer = mtl.Normalizer.fit(np.stack([s.target.y for s in train_samples]),
                                    np.stack([s.target.mask for s in train_samples]))
    model = cfg.build_model()
    params = model.init_params(np.random.default_rng([cfg.seed, _INIT]))
    state = AdamState()
    dwa = mtl.DwaState(model.head_names)
    policy = cfg.checkpoint_policy
    if policy == "best_val" and not val_samples:
        logger.warning("No validation samples, keeping the last epoch")
        policy = "last"

    log, best, best_params, best_epoch = [], np.inf, None, cfg.epochs
    for epoch in range(1, cfg.epochs + 1):
        w = mtl.dwa_weights(dwa, loss_cfg) if cfg.dwa else np.ones(len(model.head_names))
        weights = dict(zip(model.head_names, w))
        rng = np.random.default_rng([cfg.seed, _EPOCH, epoch])
        order = rng.permutation(len(train_samples))
        n_steps = -(-len(order) // cfg.batch_size)
        first_lrs = None
        sums = {h: 0.0 for h in model.head_names}
        counts = {h: 0 for h in model.head_names}
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            lrs = {g: lr_schedule(step_time(epoch, step, n_steps), cfg, g) for g in GROUPS}
            first_lrs = first_lrs or lrs
            batch = [train_samples[k] for k in order[start:start + cfg.batch_size]]
            inputs = [sample_input(s, cfg, _POINTS, epoch) for s in batch]
            y, mask = stack_targets(batch, normalizer)
            _, _, labeled, losses, grads = batch_loss(model, params, inputs, y, mask, weights, loss_cfg, True, rng)
            optimizer_step(params, grads, state, lambda name: lrs[param_group(name)],
                           cfg.weight_decay, cfg.clip_norm, cfg.betas, cfg.adam_eps)
            for name in model.head_names:
                sums[name] += float(np.sum(losses[name]))
                counts[name] += mtl.head_counts(labeled[name], cfg.n_h_mode)

        means = {h: sums[h] / counts[h] if counts[h] else 0.0 for h in model.head_names}
        dwa.record(means)
        val_total = validation_loss(model, params, val_samples, normalizer, cfg) if val_samples else None

        record = {"epoch": epoch, "lr_encoder": first_lrs["encoder"], "lr_heads": first_lrs["heads"],
                  "w": [float(x) for x in w], "val_total": val_total}
        record.update({f"loss_{h}": means[h] for h in model.head_names})
        log.append(record)
        logger.info("Epoch %d/%d: %s, val %s", epoch, cfg.epochs,
                    ", ".join(f"{h} {means[h]:.4f}" for h in model.head_names),
                    "-" if val_total is None else f"{val_total:.4f}")

        if policy == "best_val" and val_total < best:
            best, best_epoch = val_total, epoch
            best_params = {k: p.copy() for k, p in params.items()}

    if policy == "best_val":
        params = best_params
    result = TrainResult(model, params, normalizer, log, best_epoch)
    if out_dir is not None:
        save(result, cfg, out_dir)
    return result


def save(result, cfg, out_dir):
    """
    Writes the checkpoint and the training log to ``out_dir``.
    """
    net.save_checkpoint(out_dir, result.model, result.params,
                        normalizer=result.normalizer.to_json(), seed=cfg.seed,
                        epoch=result.best_epoch, train_config=config.to_dict(cfg))
    with open(os.path.join(out_dir, LOG_FILE), "w") as f:
        for record in result.log:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load(directory):
    """
    Loads a checkpoint written by :func:`train`.

    :return: the model, its parameters, the normalizer and the training settings
    :rtype: (net.MultiHeadNet, dict, mtl.Normalizer, TrainConfig)
    """
    model, params, manifest = net.load_checkpoint(directory)
    normalizer = mtl.Normalizer.from_json(manifest.get("normalizer", {}))
    cfg = config.from_dict(manifest.get("train_config", {}), TrainConfig)
    return model, params, normalizer, cfg


def predict(model, params, normalizer, samples, cfg):
    """
    Evaluation-mode predictions in target units, one row per sample, NaN for
    targets the model has no head for.

    :rtype: numpy.ndarray
    """
    rows = []
    for start in range(0, len(samples), cfg.batch_size):
        batch = samples[start:start + cfg.batch_size]
        z = model.predict(params, [sample_input(s, cfg, _POINTS) for s in batch])
        rows.append(normalizer.denormalize(z))
    return np.vstack(rows) if rows else np.zeros((0, NUM_TARGETS))
