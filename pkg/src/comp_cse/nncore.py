"""Dense residual regressor with hand-written backpropagation and AdamW.

Two topologies share the code path:

* ``csepnn``: FC input layer, three residual blocks of three FC layers, FC
  output. Every FC layer except the output one is followed by batch norm and
  ReLU; a block adds its input to the output of its last ReLU.
* ``mlp``: plain FC + ReLU stack, no batch norm, no skips.

Dense weights are stored ``(out, in)``. All arithmetic is float64.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointFormatError,
    DivergedTrainingError,
    InvalidArgumentError,
    InvalidBatchError,
    InvalidCacheError,
    InvalidLabelsError,
)

CHECKPOINT_VERSION = 1
CSEPNN = "csepnn"
MLP = "mlp"

# input width, input FC width, widths of the three FC layers inside a block
CSEPNN_WIDTHS = (17, 200, (200, 100, 200))
MLP_WIDTHS = (17, (200, 200, 200, 200))
NUM_BLOCKS = 3

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_tokens = itertools.count(1)


@dataclass
class Network:
    """Parameters, batch-norm running statistics and topology of one model.

    ``params`` holds every trainable tensor by name; ``buffers`` holds the BN
    running mean/var, which are updated by train-mode forwards only.
    """

    kind: str
    widths: tuple
    params: dict
    buffers: dict
    training: bool = True
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM
    _last_token: int = field(default=0, repr=False)

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def dense_layers(self):
        """``(prefix, fan_in, fan_out, has_bn)`` for every FC layer in order."""
        return list(_layer_plan(self.kind, self.widths))

    def num_parameters(self):
        return sum(p.size for p in self.params.values())


def _layer_plan(kind, widths):
    if kind == CSEPNN:
        n_in, hidden, block = widths
        if block[-1] != hidden:
            raise InvalidArgumentError("last block width must equal the input FC width")
        yield "in", n_in, hidden, True
        for b in range(NUM_BLOCKS):
            prev = hidden
            for j, w in enumerate(block):
                yield f"block{b}.fc{j}", prev, w, True
                prev = w
        yield "out", hidden, 1, False
    elif kind == MLP:
        n_in, hidden = widths
        prev = n_in
        for j, w in enumerate(hidden):
            yield f"fc{j}", prev, w, False
            prev = w
        yield "out", prev, 1, False
    else:
        raise InvalidArgumentError(f"unknown network kind {kind!r}")


def init_network(seed, kind=CSEPNN, widths=None) -> Network:
    """He-normal weights, zero biases, identity BN (gamma=1, beta=0)."""
    if widths is None:
        widths = CSEPNN_WIDTHS if kind == CSEPNN else MLP_WIDTHS
    widths = tuple(tuple(w) if isinstance(w, (list, tuple)) else w for w in widths)
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    for prefix, fan_in, fan_out, has_bn in _layer_plan(kind, widths):
        params[f"{prefix}.W"] = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        params[f"{prefix}.b"] = np.zeros(fan_out)
        if has_bn:
            params[f"{prefix}.gamma"] = np.ones(fan_out)
            params[f"{prefix}.beta"] = np.zeros(fan_out)
            buffers[f"{prefix}.mean"] = np.zeros(fan_out)
            buffers[f"{prefix}.var"] = np.ones(fan_out)
    return Network(kind, widths, params, buffers)


# -- layer primitives ------------------------------------------------------

def dense_forward(x, W, b):
    return x @ W.T + b


def dense_backward(dout, x, W):
    """Returns ``(dx, dW, db)``."""
    return dout @ W, dout.T @ x, dout.sum(axis=0)


def batchnorm_forward(z, gamma, beta, running_mean, running_var, training, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Batch norm; in training mode also updates the running statistics in place.

    Returns ``(out, xhat, inv_std)``; the last two are needed by the backward.
    """
    if training:
        n = z.shape[0]
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (z - mu) * inv_std
    return gamma * xhat + beta, xhat, inv_std


def batchnorm_backward(dout, xhat, inv_std, gamma):
    """Train-mode gradient, batch statistics included. Returns ``(dz, dgamma, dbeta)``."""
    n = dout.shape[0]
    dbeta = dout.sum(axis=0)
    dgamma = (dout * xhat).sum(axis=0)
    dxhat = dout * gamma
    dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dz, dgamma, dbeta


# -- network forward / backward --------------------------------------------

@dataclass
class ForwardCache:
    token: int
    training: bool
    batch_size: int
    layers: dict
    block_inputs: list


def _unit(net, prefix, x, has_bn, training, layers):
    p = net.params
    z = dense_forward(x, p[f"{prefix}.W"], p[f"{prefix}.b"])
    entry = {"x": x}
    if has_bn:
        z, xhat, inv_std = batchnorm_forward(
            z, p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
            net.buffers[f"{prefix}.mean"], net.buffers[f"{prefix}.var"],
            training, net.bn_eps, net.bn_momentum,
        )
        entry["xhat"], entry["inv_std"] = xhat, inv_std
    a = np.maximum(z, 0.0)
    entry["mask"] = z > 0
    layers[prefix] = entry
    return a


def forward(net: Network, batch):
    """Predictions ``(n,)`` and the cache needed by :func:`backward`."""
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidBatchError("batch must be a non-empty 2-D array")
    if net.training and x.shape[0] < 2:
        raise InvalidBatchError("train-mode forward needs at least 2 rows")
    layers, block_inputs = {}, []
    p = net.params
    if net.kind == CSEPNN:
        h = _unit(net, "in", x, True, net.training, layers)
        n_fc = len(net.widths[2])
        for b in range(NUM_BLOCKS):
            block_inputs.append(h)
            u = h
            for j in range(n_fc):
                u = _unit(net, f"block{b}.fc{j}", u, True, net.training, layers)
            h = u + h
    else:
        h = x
        for j in range(len(net.widths[1])):
            h = _unit(net, f"fc{j}", h, False, net.training, layers)
    layers["out"] = {"x": h}
    pred = dense_forward(h, p["out.W"], p["out.b"])[:, 0]
    token = next(_tokens)
    net._last_token = token
    return pred, ForwardCache(token, net.training, x.shape[0], layers, block_inputs)


def _unit_backward(net, prefix, da, has_bn, entry, grads):
    p = net.params
    dz = da * entry["mask"]
    if has_bn:
        dz, grads[f"{prefix}.gamma"], grads[f"{prefix}.beta"] = batchnorm_backward(
            dz, entry["xhat"], entry["inv_std"], p[f"{prefix}.gamma"]
        )
    dx, grads[f"{prefix}.W"], grads[f"{prefix}.b"] = dense_backward(dz, entry["x"], p[f"{prefix}.W"])
    return dx


def backward(net: Network, cache: ForwardCache, dloss_dpred) -> dict:
    """Exact gradients of every parameter, keyed like ``net.params``."""
    if not isinstance(cache, ForwardCache) or cache.token != net._last_token:
        raise InvalidCacheError("cache does not belong to the latest forward of this network")
    if not cache.training:
        raise InvalidCacheError("backward needs a train-mode forward")
    g = np.asarray(dloss_dpred, dtype=float)
    if g.shape != (cache.batch_size,):
        raise InvalidCacheError(f"gradient shape {g.shape} does not match batch of {cache.batch_size}")
    grads = {}
    L = cache.layers
    dh, grads["out.W"], grads["out.b"] = dense_backward(g[:, None], L["out"]["x"], net.params["out.W"])
    if net.kind == CSEPNN:
        n_fc = len(net.widths[2])
        for b in reversed(range(NUM_BLOCKS)):
            du = dh
            for j in reversed(range(n_fc)):
                name = f"block{b}.fc{j}"
                du = _unit_backward(net, name, du, True, L[name], grads)
            dh = dh + du  # skip path
        _unit_backward(net, "in", dh, True, L["in"], grads)
    else:
        for j in reversed(range(len(net.widths[1]))):
            name = f"fc{j}"
            dh = _unit_backward(net, name, dh, False, L[name], grads)
    return {k: grads[k] for k in net.params}


def predict(net: Network, X, batch_size=8192):
    """Eval-mode predictions; leaves the network's mode unchanged."""
    was_training = net.training
    net.eval()
    try:
        X = np.asarray(X, dtype=float)
        out = [forward(net, X[i:i + batch_size])[0] for i in range(0, len(X), batch_size)]
    finally:
        net.training = was_training
    return np.concatenate(out) if out else np.empty(0)


# -- loss ------------------------------------------------------------------

@dataclass(frozen=True)
class HuberParams:
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidArgumentError("Huber delta must be > 0")


def huber_loss(labels, predictions, params: HuberParams):
    """Mean Huber loss and its gradient with respect to the predictions."""
    y = np.asarray(labels, dtype=float)
    f = np.asarray(predictions, dtype=float)
    if y.shape != f.shape or y.ndim != 1:
        raise InvalidArgumentError(f"labels {y.shape} and predictions {f.shape} must be equal-length vectors")
    if y.size == 0:
        raise InvalidArgumentError("need at least one sample")
    delta = params.delta
    r = f - y
    a = np.abs(r)
    per_sample = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.clip(r, -delta, delta) / y.size
    return float(per_sample.mean()), grad


def delta_from_labels(train_labels) -> HuberParams:
    y = np.asarray(train_labels, dtype=float)
    if y.size == 0:
        raise InvalidLabelsError("no training labels")
    mean = y.mean()
    if not mean > 0:
        raise InvalidLabelsError(f"training label mean must be positive, got {mean}")
    return HuberParams(0.3 * mean)


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adamw_step(state: AdamWState, params: dict, grads: dict):
    """One decoupled-weight-decay Adam update, applied to ``params`` in place."""
    if set(params) != set(grads):
        raise InvalidArgumentError("params and grads must have the same keys")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergedTrainingError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, theta in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(theta)
            state.second_moment[name] = np.zeros_like(theta)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps_opt) + state.weight_decay * theta
        theta -= state.lr * update
    return params, state


# -- checkpoint ------------------------------------------------------------

def _tensor(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "values": a.ravel().tolist()}


def _untensor(entry, name):
    try:
        values = np.array(entry["values"], dtype=float)
        return values.reshape(entry["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"bad tensor {name!r}: {exc}") from None


def save_checkpoint(net: Network, dataset_stats: dict, extra: dict | None = None) -> bytes:
    """Serialize a network and feature statistics to JSON text bytes.

    ``dataset_stats`` needs ``feature_means`` and ``feature_stds``. Floats use
    the shortest round-trip representation so reloading is bit-exact.
    """
    for name, p in net.params.items():
        if not np.all(np.isfinite(p)):
            raise InvalidArgumentError(f"parameter {name!r} is not finite")
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": net.kind,
        "widths": net.widths,
        "bn_eps": net.bn_eps,
        "bn_momentum": net.bn_momentum,
        "params": {k: _tensor(v) for k, v in net.params.items()},
        "buffers": {k: _tensor(v) for k, v in net.buffers.items()},
        "feature_means": _tensor(dataset_stats["feature_means"]),
        "feature_stds": _tensor(dataset_stats["feature_stds"]),
    }
    if extra:
        doc["extra"] = extra
    return (json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n").encode()


def load_checkpoint(payload: bytes):
    """Inverse of :func:`save_checkpoint`; returns ``(net, stats)`` with ``net`` in eval mode."""
    try:
        doc = json.loads(payload.decode() if isinstance(payload, (bytes, bytearray)) else payload)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_VERSION:
        version = doc.get("format_version") if isinstance(doc, dict) else None
        raise CheckpointFormatError(f"unsupported checkpoint version {version!r}")
    try:
        net = init_network(0, doc["kind"], _as_widths(doc["widths"]))
        for group in ("params", "buffers"):
            target = getattr(net, group)
            if set(doc[group]) != set(target):
                raise CheckpointFormatError(f"{group} names do not match the topology")
            for name in target:
                arr = _untensor(doc[group][name], name)
                if arr.shape != target[name].shape:
                    raise CheckpointFormatError(f"{name!r} has shape {arr.shape}, expected {target[name].shape}")
                target[name] = arr
        net.bn_eps = float(doc["bn_eps"])
        net.bn_momentum = float(doc["bn_momentum"])
        stats = {
            "feature_means": _untensor(doc["feature_means"], "feature_means"),
            "feature_stds": _untensor(doc["feature_stds"], "feature_stds"),
        }
    except (KeyError, TypeError, InvalidArgumentError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint: {exc}") from None
    stats["extra"] = doc.get("extra", {})
    return net.eval(), stats


def _as_widths(w):
    return tuple(tuple(x) if isinstance(x, list) else x for x in w)
