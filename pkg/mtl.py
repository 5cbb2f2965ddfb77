"""
This module holds the multi-task loss: Z-score target normalization, the Huber
loss, the masked sample loss that averages a head's Huber losses over the
labeled targets of one sample, Dynamic Weight Averaging of the heads, and the
weighted total loss.

>>> cfg = LossConfig()
>>> huber(np.array([0.5, 2.0]), cfg.huber_delta)
array([0.125, 1.5  ])
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError, FormatError
from targets import NUM_TARGETS

logger = logging.getLogger(__name__)

N_H_MODES = ("labeled", "all")


@dataclass(frozen=True)
class LossConfig:
    """
    ``huber_delta`` is in normalized target units, ``epsilon`` guards the
    masked sample loss denominator and ``temperature`` softens the DWA
    softmax. ``n_h_mode`` selects what a head's batch mean divides by: the
    samples labeled for the head (``"labeled"``) or the whole batch
    (``"all"``).
    """
    huber_delta: float = 1.0
    epsilon: float = 1e-8
    temperature: float = 2.0
    n_h_mode: str = "labeled"

    def __post_init__(self):
        for name in ("huber_delta", "epsilon", "temperature"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.n_h_mode not in N_H_MODES:
            raise ConfigError(f"n_h_mode must be one of {N_H_MODES}, got '{self.n_h_mode}'")


### normalization ###

@dataclass
class Normalizer:
    """
    Per-target mean and standard deviation, fitted on the labeled training
    values only.
    """
    mean: np.ndarray = field(default_factory=lambda: np.zeros(NUM_TARGETS))
    std: np.ndarray = field(default_factory=lambda: np.ones(NUM_TARGETS))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != (NUM_TARGETS,) or self.std.shape != (NUM_TARGETS,):
            raise FormatError(f"normalizer needs {NUM_TARGETS} means and stds")
        if not np.all(self.std > 0):
            raise FormatError("normalizer standard deviations must be > 0")

    @classmethod
    def fit(cls, y, mask):
        """
        Population mean and standard deviation of each target over its labeled
        entries. Targets with fewer than two labeled values, or with constant
        values, keep a standard deviation of 1.

        :param y: target values, one row per sample
        :type y: numpy.ndarray

        :param mask: presence bits, same shape as ``y``
        :type mask: numpy.ndarray

        :rtype: Normalizer
        """
        y = np.asarray(y, dtype=np.float64).reshape(-1, NUM_TARGETS)
        mask = np.asarray(mask, dtype=bool).reshape(-1, NUM_TARGETS)
        mean, std = np.zeros(NUM_TARGETS), np.ones(NUM_TARGETS)
        for j in range(NUM_TARGETS):
            values = y[mask[:, j], j]
            if len(values):
                mean[j] = values.mean()
            if len(values) >= 2 and values.std() > 0:
                std[j] = values.std()
            else:
                logger.warning("Target %d has %d distinct labeled values, using unit std", j, len(np.unique(values)))
        return cls(mean, std)

    def normalize(self, y, mask):
        """
        ``(y - mean) / std`` on labeled entries; masked entries pass through.
        """
        y = np.asarray(y, dtype=np.float64)
        return np.where(mask, (y - self.mean) / self.std, y)

    def denormalize(self, z, mask=None):
        z = np.asarray(z, dtype=np.float64)
        y = z * self.std + self.mean
        return y if mask is None else np.where(mask, y, z)

    def to_json(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, data):
        try:
            return cls(data["mean"], data["std"])
        except (KeyError, TypeError) as e:
            raise FormatError(f"malformed normalizer: {e}") from e


### per-sample loss ###

def huber(r, delta):
    """
    ``0.5 r^2`` inside ``[-delta, delta]``, ``delta (|r| - 0.5 delta)``
    outside. Elementwise.

    >>> huber(np.array([0.0, 0.5, 2.0]), 1.0)
    array([0.   , 0.125, 1.5  ])
    """
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def huber_grad(r, delta):
    return np.clip(r, -delta, delta)


def _head_residuals(pred, y, mask, head):
    index = list(head.targets)
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))[:, index]
    m = np.atleast_2d(np.asarray(mask, dtype=bool))[:, index]
    if pred.shape != y.shape:
        raise ValueError(f"head {head.name} predicts {head.output_dim} targets, got shape {pred.shape}")
    return np.where(m, pred - np.where(m, y, 0.0), 0.0), m


def masked_sample_loss(pred, y, mask, head, cfg):
    """
    The loss of each sample for one head: the Huber losses of the labeled
    targets of the head, summed and divided by their count plus ``epsilon``.
    A sample with no label in the head has loss 0.

    :param pred: head outputs, shape ``(B, k)`` or ``(k,)``
    :type pred: numpy.ndarray

    :param y: normalized targets, shape ``(B, 10)`` or ``(10,)``
    :type y: numpy.ndarray

    :param mask: presence bits matching ``y``
    :type mask: numpy.ndarray

    :param head: the head
    :type head: targets.HeadSpec

    :param cfg: the loss parameters
    :type cfg: LossConfig

    :return: one loss per sample
    :rtype: numpy.ndarray

    >>> masked_sample_loss([0.5, 0.5, 9.0], np.zeros(10), [0, 1, 1, 0] + [0] * 6, HEADS["A"], LossConfig())
    array([0.125])
    """
    r, m = _head_residuals(pred, y, mask, head)
    return (huber(r, cfg.huber_delta) * m).sum(axis=1) / (m.sum(axis=1) + cfg.epsilon)


def masked_sample_loss_grad(pred, y, mask, head, cfg):
    """
    Gradient of :func:`masked_sample_loss` with respect to ``pred``. Entries
    of masked targets are exactly zero.

    :rtype: numpy.ndarray
    """
    r, m = _head_residuals(pred, y, mask, head)
    return huber_grad(r, cfg.huber_delta) * m / (m.sum(axis=1, keepdims=True) + cfg.epsilon)


### dynamic weight averaging ###

@dataclass
class DwaState:
    """
    The per-epoch mean loss of every head, oldest first.
    """
    heads: tuple
    history: list = field(default_factory=list)

    def record(self, means):
        """
        Appends the epoch mean losses, keyed by head name.
        """
        self.history.append(np.array([float(means[h]) for h in self.heads]))

    @property
    def epoch(self):
        """
        The epoch the next weights are for, counted from 1.
        """
        return len(self.history) + 1


def dwa_weights(state, cfg):
    """
    ``w_h = H exp(r_h / T) / sum_k exp(r_k / T)`` with ``r_h`` the ratio of
    the last two epoch losses of head ``h``. The first two epochs use uniform
    weights. A previous loss of zero gives the neutral ratio 1.

    :param state: the loss history
    :type state: DwaState

    :param cfg: the loss parameters
    :type cfg: LossConfig

    :return: one weight per head, summing to the number of heads
    :rtype: numpy.ndarray
    """
    h = len(state.heads)
    if len(state.history) < 2:
        return np.ones(h)
    last, before = state.history[-1], state.history[-2]
    zero = before == 0
    if zero.any():
        logger.warning("DWA: zero loss history for heads %s, using ratio 1",
                       [state.heads[k] for k in np.flatnonzero(zero)])
    r = np.where(zero, 1.0, last / np.where(zero, 1.0, before))
    e = np.exp((r - r.max()) / cfg.temperature)
    return h * e / e.sum()


def head_counts(labeled, mode):
    """
    The batch mean divisor ``N_h`` of one head.

    :param labeled: for each sample, whether it has a label in the head
    :type labeled: numpy.ndarray

    :param mode: ``"labeled"`` or ``"all"``
    :type mode: str

    :rtype: int
    """
    labeled = np.asarray(labeled, dtype=bool)
    return int(labeled.sum()) if mode == "labeled" else len(labeled)


def total_loss(losses, labeled, weights, mode="labeled"):
    """
    ``sum_h w_h / N_h sum_i l_ih``. Heads with ``N_h = 0`` contribute 0.

    :param losses: per-sample losses keyed by head name
    :type losses: {str : numpy.ndarray}

    :param labeled: per-sample labeled flags keyed by head name
    :type labeled: {str : numpy.ndarray}

    :param weights: head weights keyed by head name
    :type weights: {str : float}

    :param mode: the ``N_h`` interpretation
    :type mode: str

    :return: the total and the per-head means
    :rtype: (float, {str : float})
    """
    total, means = 0.0, {}
    for name, loss in losses.items():
        n = head_counts(labeled[name], mode)
        means[name] = float(np.sum(loss)) / n if n else 0.0
        total += weights[name] * means[name]
    return total, means


def total_loss_grad(labeled, weights, mode="labeled"):
    """
    ``d total / d l_ih`` for every sample, keyed by head name.
    """
    grads = {}
    for name, flags in labeled.items():
        n = head_counts(flags, mode)
        grads[name] = np.full(len(flags), weights[name] / n if n else 0.0)
    return grads
