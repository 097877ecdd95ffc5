"""Minimal dense network engine: forward, exact reverse-mode gradients,
SGD and Adam steps, categorical sampling, and flat-parameter checkpoints.

Parameters live in one flat float64 vector per network; layer l owns the
slice [(fan_in+1)*fan_out] laid out as weights (fan_in, fan_out) then bias.
"""

from __future__ import annotations

import json
import struct

from dataclasses import dataclass
import numpy as np

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_HEADS = ("linear", "softmax")

CHECKPOINT_MAGIC = b"MDNN"


@dataclass(frozen=True)
class NetSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_head: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("network needs at least input and output layers")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in OUTPUT_HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def param_count(self) -> int:
        sizes = self.layer_sizes
        return sum((sizes[i] + 1) * sizes[i + 1] for i in range(self.n_layers))

    def layer_slices(self):
        """Yield (W_slice, b_slice, fan_in, fan_out) per layer."""
        offset = 0
        sizes = self.layer_sizes
        for i in range(self.n_layers):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            w = slice(offset, offset + fan_in * fan_out)
            b = slice(offset + fan_in * fan_out, offset + (fan_in + 1) * fan_out)
            offset += (fan_in + 1) * fan_out
            yield w, b, fan_in, fan_out


def init_params(spec: NetSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    params = np.zeros(spec.param_count())
    for w, b, fan_in, fan_out in spec.layer_slices():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[w] = rng.uniform(-bound, bound, fan_in * fan_out)
    return params


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(spec: NetSpec, params: np.ndarray, x: np.ndarray):
    """Evaluate the network; returns (output, cache) with cache reusable by
    backward(). Accepts a single sample (d,) or a batch (n, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != spec.layer_sizes[0]:
        raise ValueError(f"input width {a.shape[1]} != first layer {spec.layer_sizes[0]}")
    if params.shape != (spec.param_count(),):
        raise ValueError("parameter vector length mismatch")
    inputs = [a]
    preacts = []
    for i, (w, b, fan_in, fan_out) in enumerate(spec.layer_slices()):
        W = params[w].reshape(fan_in, fan_out)
        z = a @ W + params[b]
        preacts.append(z)
        if i < spec.n_layers - 1:
            a = np.maximum(z, 0.0) if spec.hidden_activation == "relu" else np.tanh(z)
            inputs.append(a)
    out = preacts[-1]
    if spec.output_head == "softmax":
        out = _softmax(out)
    cache = {"inputs": inputs, "preacts": preacts, "output": out, "single": single}
    return (out[0] if single else out), cache


def backward(spec: NetSpec, params: np.ndarray, cache: dict,
             grad_output: np.ndarray) -> np.ndarray:
    """Exact gradient of sum(grad_output * output) w.r.t. the flat params.

    grad_output is dLoss/dOutput with the same shape as the forward output;
    for a softmax head the Jacobian of the normalization is applied here.
    """
    dy = np.asarray(grad_output, dtype=np.float64)
    if cache["single"]:
        dy = dy[None, :]
    if spec.output_head == "softmax":
        p = cache["output"]
        dz = p * (dy - (dy * p).sum(axis=-1, keepdims=True))
    else:
        dz = dy
    return _backprop_from_logits(spec, params, cache, dz)


def _backprop_from_logits(spec: NetSpec, params: np.ndarray, cache: dict,
                          dz_last: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(params)
    slices = list(spec.layer_slices())
    dz = dz_last
    for i in range(spec.n_layers - 1, -1, -1):
        w, b, fan_in, fan_out = slices[i]
        a_in = cache["inputs"][i]
        grad[w] = (a_in.T @ dz).ravel()
        grad[b] = dz.sum(axis=0)
        if i > 0:
            W = params[w].reshape(fan_in, fan_out)
            da = dz @ W.T
            z_prev = cache["preacts"][i - 1]
            if spec.hidden_activation == "relu":
                dz = da * (z_prev > 0)
            else:
                dz = da * (1.0 - np.tanh(z_prev) ** 2)
    return grad


def softmax_cross_entropy(spec: NetSpec, params: np.ndarray, x: np.ndarray,
                          labels: np.ndarray):
    """Mean cross-entropy of a softmax-head net and its parameter gradient."""
    if spec.output_head != "softmax":
        raise ValueError("cross-entropy loss requires a softmax head")
    probs, cache = forward(spec, params, x)
    z = cache["preacts"][-1]
    logp = z - _logsumexp(z)
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    dz = cache["output"].copy()
    dz[np.arange(n), labels] -= 1.0
    grad = _backprop_from_logits(spec, params, cache, dz / n)
    return loss, grad


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def sgd_step(params: np.ndarray, grad: np.ndarray, eta: float) -> np.ndarray:
    """Plain gradient-descent step: params - eta * grad."""
    if params.shape != grad.shape:
        raise ValueError("parameter/gradient shape mismatch")
    return params - eta * grad


@dataclass
class AdamState:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    @classmethod
    def for_params(cls, n_params: int, learning_rate: float = 5e-4) -> "AdamState":
        return cls(learning_rate=learning_rate,
                   m=np.zeros(n_params), v=np.zeros(n_params))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """Bias-corrected Adam update; returns (new_params, new_state)."""
    if params.shape != grad.shape:
        raise ValueError("parameter/gradient shape mismatch")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    m = state.m if state.m is not None else np.zeros_like(params)
    v = state.v if state.v is not None else np.zeros_like(params)
    t = state.step + 1
    m = state.beta1 * m + (1 - state.beta1) * grad
    v = state.beta2 * v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(state.learning_rate, state.beta1, state.beta2,
                          state.eps, t, m, v)
    return new_params, new_state


def masked_softmax(logits: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Softmax restricted to allowed entries; masked entries get probability 0."""
    z = np.asarray(logits, dtype=np.float64)
    if mask is None:
        return _softmax(z)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("every sample needs at least one allowed action")
    z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def sample_categorical(probs: np.ndarray, mask: np.ndarray | None,
                       rng: np.random.Generator):
    """Sample an index from probs (renormalized over the mask); returns
    (index, log-probability of the sampled index)."""
    p = np.asarray(probs, dtype=np.float64)
    if mask is not None:
        p = np.where(np.asarray(mask, dtype=bool), p, 0.0)
    total = p.sum()
    if total <= 0:
        raise ValueError("no probability mass on allowed actions")
    p = p / total
    idx = int(rng.choice(len(p), p=p))
    return idx, float(np.log(p[idx]))


def categorical_entropy(probs: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Entropy of the (mask-renormalized) distribution, with 0*log(0) = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if mask is not None:
        p = np.where(np.asarray(mask, dtype=bool), p, 0.0)
    total = p.sum()
    if total <= 0:
        raise ValueError("no probability mass on allowed actions")
    p = p / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def save_params(path, spec: NetSpec, params: np.ndarray) -> None:
    """Checkpoint: magic, u32 descriptor length, JSON descriptor,
    u64 count, little-endian float64 values."""
    descriptor = json.dumps({
        "layer_sizes": list(spec.layer_sizes),
        "hidden_activation": spec.hidden_activation,
        "output_head": spec.output_head,
    }).encode("utf-8")
    values = np.asarray(params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(descriptor)))
        fh.write(descriptor)
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.tobytes())


def load_params(path):
    """Inverse of save_params; returns (spec, params)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    (desc_len,) = struct.unpack_from("<I", data, 4)
    descriptor = json.loads(data[8:8 + desc_len].decode("utf-8"))
    spec = NetSpec(tuple(descriptor["layer_sizes"]),
                   descriptor["hidden_activation"], descriptor["output_head"])
    (count,) = struct.unpack_from("<Q", data, 8 + desc_len)
    params = np.frombuffer(data, dtype="<f8", count=count, offset=16 + desc_len).copy()
    if params.size != spec.param_count():
        raise ValueError("checkpoint length does not match its descriptor")
    return spec, params
