"""
This module contains the multi-headed regression network: a pluggable point
cloud encoder that maps a cloud to one shared feature vector, and one MLP head
per target group. Forward and backward passes are written out by hand in
64-bit floating point; parameters live in an ordered dictionary of named
blocks so that the optimizer and the checkpoint files can treat them uniformly.

>>> model = MultiHeadNet(PointMlpEncoder(DESK_DIMS))
>>> params = model.init_params(np.random.default_rng(0))
>>> outputs, cache = model.forward(params, [prepare_input(cloud.points)])
>>> outputs["A"].shape
(1, 3)
"""

import json
import logging
import os
from abc import ABC, abstractmethod

import numpy as np
from scipy.special import erf

from errors import CheckpointNotFoundError, EmptyInputError, FormatError
from targets import HEAD_ORDER, HEADS, NUM_TARGETS, TARGET_NAMES

logger = logging.getLogger(__name__)

# Per-point MLP widths of the reference encoder
REFERENCE_DIMS = (64, 128, 512)
DESK_DIMS = (32, 64, 128)

HEAD_HIDDEN = (256, 128)
DROPOUT = 0.1

# Input coordinates are divided by this after centering (mm to m)
INPUT_SCALE_MM = 1000.0
INPUT_CHANNELS = 6

LN_EPS = 1e-5

MANIFEST_FILE = "manifest.json"
PARAMS_FILE = "params.bin"
CHECKPOINT_FORMAT = 1

_SQRT2 = np.sqrt(2.0)
_SQRT2PI = np.sqrt(2.0 * np.pi)


def prepare_input(points):
    """
    Centers a cloud on its centroid, converts it to meters and duplicates the
    coordinates into ``N x 6`` input features.

    :param points: the cloud in mm
    :type points: numpy.ndarray

    :rtype: numpy.ndarray

    :raises EmptyInputError: for a cloud without points
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyInputError("cannot encode an empty point cloud")
    x = (points - points.mean(axis=0)) / INPUT_SCALE_MM
    return np.hstack([x, x])


### layers ###

def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) / _SQRT2PI


def layer_norm(x, gamma, beta):
    xc = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv)


def layer_norm_backward(cache, gamma, dy):
    xhat, inv = cache
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def init_linear(rng, fan_in, fan_out):
    """
    Uniform weights in ``+-sqrt(3 / fan_in)``, i.e. variance ``1 / fan_in``,
    and zero biases.
    """
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_dense(rng, prefix, fan_in, fan_out):
    W, b = init_linear(rng, fan_in, fan_out)
    return {f"{prefix}.W": W, f"{prefix}.b": b,
            f"{prefix}.gamma": np.ones(fan_out), f"{prefix}.beta": np.zeros(fan_out)}


def dense_forward(params, prefix, x):
    """
    Linear layer, layer normalization and GELU.
    """
    z = x @ params[f"{prefix}.W"] + params[f"{prefix}.b"]
    n, ln = layer_norm(z, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])
    return gelu(n), (x, ln, n)


def dense_backward(params, prefix, cache, dy, grads):
    """
    Accumulates the block gradients into ``grads`` and returns the input
    gradient.
    """
    x, ln, n = cache
    dn = dy * gelu_grad(n)
    dz, dgamma, dbeta = layer_norm_backward(ln, params[f"{prefix}.gamma"], dn)
    grads[f"{prefix}.gamma"] += dgamma
    grads[f"{prefix}.beta"] += dbeta
    grads[f"{prefix}.W"] += x.T @ dz
    grads[f"{prefix}.b"] += dz.sum(axis=0)
    return dz @ params[f"{prefix}.W"].T


def dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


### encoders ###

class Encoder(ABC):
    """
    Maps the ``N x 6`` input features of one cloud to a feature vector of
    ``feature_dim`` values. Implementations own the parameter blocks whose
    names start with ``encoder.``.
    """
    name = None

    @property
    @abstractmethod
    def feature_dim(self):
        pass

    @abstractmethod
    def init_params(self, rng):
        """
        :rtype: {str : numpy.ndarray}
        """

    @abstractmethod
    def forward(self, params, x):
        """
        :return: the feature vector and the cache for :meth:`backward`
        :rtype: (numpy.ndarray, object)
        """

    @abstractmethod
    def backward(self, params, cache, dfeature, grads):
        """
        Adds the parameter gradients of one cloud to ``grads``.
        """

    @abstractmethod
    def describe(self):
        """
        The JSON description stored in checkpoints.
        """


class PointMlpEncoder(Encoder):
    """
    A per-point MLP (linear, layer norm, GELU at every width) followed by a
    coordinatewise max over the points, so the feature does not depend on
    point order.
    """
    name = "point_mlp"

    def __init__(self, dims=REFERENCE_DIMS):
        if not dims or min(dims) < 1:
            raise ValueError(f"encoder widths must be positive, got {dims}")
        self.dims = tuple(int(d) for d in dims)

    @property
    def feature_dim(self):
        return self.dims[-1]

    def _prefixes(self):
        return [f"encoder.{k}" for k in range(len(self.dims))]

    def init_params(self, rng):
        params = {}
        fan_in = INPUT_CHANNELS
        for prefix, width in zip(self._prefixes(), self.dims):
            params.update(init_dense(rng, prefix, fan_in, width))
            fan_in = width
        return params

    def forward(self, params, x):
        caches = []
        h = x
        for prefix in self._prefixes():
            h, c = dense_forward(params, prefix, h)
            caches.append(c)
        arg = np.argmax(h, axis=0)
        return h[arg, np.arange(h.shape[1])], (caches, arg, h.shape)

    def backward(self, params, cache, dfeature, grads):
        caches, arg, shape = cache
        dh = np.zeros(shape)
        dh[arg, np.arange(shape[1])] = dfeature
        for prefix, c in zip(reversed(self._prefixes()), reversed(caches)):
            dh = dense_backward(params, prefix, c, dh, grads)

    def describe(self):
        return {"name": self.name, "dims": list(self.dims)}


ENCODERS = {
    PointMlpEncoder.name: PointMlpEncoder,
}


def encode(encoder, params, points):
    """
    The feature vector of one cloud.

    :param encoder: the encoder
    :type encoder: Encoder

    :param params: the parameter blocks
    :type params: {str : numpy.ndarray}

    :param points: the cloud in mm, ``N x 3``
    :type points: numpy.ndarray

    :rtype: numpy.ndarray
    """
    return encoder.forward(params, prepare_input(points))[0]


### heads ###

class MlpHead:
    """
    ``in -> 256 -> 128 -> k``: two hidden blocks of linear, layer norm, GELU
    and dropout, then a linear output layer.
    """

    def __init__(self, spec, in_dim, hidden=HEAD_HIDDEN, dropout=DROPOUT):
        if not 0 <= dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        self.spec = spec
        self.in_dim = int(in_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.dropout = float(dropout)

    @property
    def name(self):
        return self.spec.name

    def _prefixes(self):
        return [f"head.{self.name}.{k}" for k in range(len(self.hidden))]

    def init_params(self, rng):
        params = {}
        fan_in = self.in_dim
        for prefix, width in zip(self._prefixes(), self.hidden):
            params.update(init_dense(rng, prefix, fan_in, width))
            fan_in = width
        W, b = init_linear(rng, fan_in, self.spec.output_dim)
        params[f"head.{self.name}.out.W"] = W
        params[f"head.{self.name}.out.b"] = b
        return params

    def forward(self, params, f, train=False, rng=None):
        """
        Head outputs in normalized target units. Dropout is only applied when
        ``train`` is set, with masks drawn from ``rng``.

        :param f: the features, ``B x in_dim``
        :type f: numpy.ndarray

        :rtype: (numpy.ndarray, object)
        """
        caches, masks = [], []
        h = np.atleast_2d(f)
        for prefix in self._prefixes():
            h, c = dense_forward(params, prefix, h)
            caches.append(c)
            mask = dropout_mask(rng, h.shape, self.dropout) if train and self.dropout > 0 else None
            if mask is not None:
                h = h * mask
            masks.append(mask)
        out = h @ params[f"head.{self.name}.out.W"] + params[f"head.{self.name}.out.b"]
        return out, (caches, masks, h)

    def backward(self, params, cache, dout, grads):
        caches, masks, h = cache
        grads[f"head.{self.name}.out.W"] += h.T @ dout
        grads[f"head.{self.name}.out.b"] += dout.sum(axis=0)
        dh = dout @ params[f"head.{self.name}.out.W"].T
        for prefix, c, mask in zip(reversed(self._prefixes()), reversed(caches), reversed(masks)):
            if mask is not None:
                dh = dh * mask
            dh = dense_backward(params, prefix, c, dh, grads)
        return dh


### the model ###

class MultiHeadNet:
    """
    A shared encoder and a subset of the ``H``, ``A`` and ``BC`` heads.
    """

    def __init__(self, encoder, heads=HEAD_ORDER, hidden=HEAD_HIDDEN, dropout=DROPOUT):
        unknown = [h for h in heads if h not in HEADS]
        if unknown or not heads:
            raise ValueError(f"heads must be a non-empty subset of {HEAD_ORDER}, got {heads}")
        self.encoder = encoder
        self.head_names = tuple(h for h in HEAD_ORDER if h in heads)
        self.heads = {h: MlpHead(HEADS[h], encoder.feature_dim, hidden, dropout) for h in self.head_names}
        self.hidden = tuple(hidden)
        self.dropout = float(dropout)

    def init_params(self, rng):
        """
        Fan-in scaled uniform weights, unit layer norm gains and zero biases,
        encoder first and heads in canonical order.
        """
        params = self.encoder.init_params(rng)
        for name in self.head_names:
            params.update(self.heads[name].init_params(rng))
        return params

    def forward(self, params, inputs, train=False, rng=None):
        """
        :param inputs: one ``N_i x 6`` feature array per sample
        :type inputs: list

        :return: head outputs keyed by head name, each ``B x k``, and the cache
        :rtype: ({str : numpy.ndarray}, object)
        """
        encoded = [self.encoder.forward(params, x) for x in inputs]
        features = np.stack([f for f, _ in encoded])

        # one dropout stream per canonical head, whichever heads are present
        seeds = rng.integers(0, 2 ** 62, size=len(HEAD_ORDER)) if train else [None] * len(HEAD_ORDER)
        streams = dict(zip(HEAD_ORDER, seeds))

        outputs, head_caches = {}, {}
        for name in self.head_names:
            head_rng = np.random.default_rng(streams[name]) if train else None
            outputs[name], head_caches[name] = self.heads[name].forward(params, features, train, head_rng)
        return outputs, ([c for _, c in encoded], head_caches)

    def backward(self, params, cache, douts):
        """
        Gradients of every parameter block, given the gradients of the head
        outputs. Heads missing from ``douts`` get zero gradients.

        :rtype: {str : numpy.ndarray}
        """
        enc_caches, head_caches = cache
        grads = {name: np.zeros_like(p) for name, p in params.items()}
        dfeatures = np.zeros((len(enc_caches), self.encoder.feature_dim))
        for name in self.head_names:
            if name in douts:
                dfeatures = dfeatures + self.heads[name].backward(params, head_caches[name], douts[name], grads)
        for c, df in zip(enc_caches, dfeatures):
            self.encoder.backward(params, c, df, grads)
        return grads

    def predict(self, params, inputs):
        """
        Evaluation-mode outputs as ``B x 10`` normalized target vectors, NaN
        for targets without a head.
        """
        outputs, _ = self.forward(params, inputs)
        result = np.full((len(inputs), NUM_TARGETS), np.nan)
        for name, out in outputs.items():
            result[:, list(HEADS[name].targets)] = out
        return result

    def describe(self):
        return {
            "encoder": self.encoder.describe(),
            "heads": list(self.head_names),
            "head_hidden": list(self.hidden),
            "dropout": self.dropout,
            "input_scale_mm": INPUT_SCALE_MM,
        }

    @classmethod
    def from_description(cls, data):
        try:
            encoder_data = dict(data["encoder"])
            encoder_cls = ENCODERS[encoder_data.pop("name")]
            encoder = encoder_cls(**encoder_data)
            return cls(encoder, tuple(data["heads"]), tuple(data["head_hidden"]), data["dropout"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed architecture description: {e}") from e


### checkpoints ###

def save_checkpoint(directory, model, params, **extra):
    """
    Writes ``manifest.json`` (architecture, target order, parameter block
    table and any ``extra`` entries) and ``params.bin`` (all blocks as
    little-endian float64, in table order).

    :param directory: the checkpoint directory, created if needed
    :type directory: str

    :return: the manifest path
    :rtype: str
    """
    os.makedirs(directory, exist_ok=True)
    blocks, offset = [], 0
    for name, p in params.items():
        blocks.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += 8 * p.size

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "architecture": model.describe(),
        "targets": list(TARGET_NAMES),
        "blocks": blocks,
        **extra,
    }
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=4, sort_keys=True)
        f.write("\n")
    with open(os.path.join(directory, PARAMS_FILE), "wb") as f:
        for p in params.values():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    logger.info("Saved checkpoint with %d parameters to %s", offset // 8, directory)
    return manifest_path


def load_checkpoint(directory):
    """
    Reads a checkpoint written by :func:`save_checkpoint`.

    :return: the model, its parameters and the full manifest
    :rtype: (MultiHeadNet, {str : numpy.ndarray}, dict)

    :raises CheckpointNotFoundError: if a checkpoint file is missing
    :raises FormatError: if the files disagree with each other
    """
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    params_path = os.path.join(directory, PARAMS_FILE)
    for path in (manifest_path, params_path):
        if not os.path.isfile(path):
            raise CheckpointNotFoundError(f"checkpoint file not found: {path}")

    try:
        with open(manifest_path, "r") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path} is not valid JSON: {e}") from e
    with open(params_path, "rb") as f:
        payload = f.read()

    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unsupported checkpoint format {manifest.get('format')}")
    if tuple(manifest.get("targets", ())) != TARGET_NAMES:
        raise FormatError("checkpoint target order does not match this version")

    model = MultiHeadNet.from_description(manifest.get("architecture"))
    params = {}
    try:
        for block in manifest["blocks"]:
            shape = tuple(block["shape"])
            size = int(np.prod(shape))
            start = block["offset"]
            if start + 8 * size > len(payload):
                raise FormatError(f"block '{block['name']}' runs past the end of {PARAMS_FILE}")
            params[block["name"]] = np.frombuffer(payload, dtype="<f8", count=size, offset=start).reshape(shape).astype(np.float64)
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed block table: {e}") from e

    expected = model.init_params(np.random.default_rng(0))
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise FormatError("checkpoint blocks do not match the architecture")
    return model, {k: params[k] for k in expected}, manifest
