"""Minimal dense-network engine sized for 2D problems.

Hand-rolled reverse mode keeps every gradient path explicit: parameter
gradients for training, and per-input-block gradients for the chain-rule
analysis and classifier guidance. float64 throughout; all randomness flows
through explicit generators.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError

CHECKPOINT_SCHEMA_VERSION = 1
TIME_EMBED_WIDTH = 32


def time_embedding(t, width: int = TIME_EMBED_WIDTH):
    """Sinusoidal features of diffusion time.

    Times map to the 0..999 position scale before embedding; the slowest
    frequency is monotone on that range, so distinct grid times stay distinct
    in embedding space.
    """
    t = np.asarray(t, dtype=np.float64)
    scalar = t.ndim == 0
    pos = np.atleast_1d(t) * 999.0
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = pos[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb[0] if scalar else emb


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of a dense network: named input blocks, hidden widths, output head."""

    input_blocks: tuple  # ((name, width), ...)
    hidden: tuple
    output_kind: str  # "regression" | "logits"
    output_dim: int
    activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_blocks", tuple((str(n), int(w)) for n, w in self.input_blocks))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.output_kind not in ("regression", "logits"):
            raise ConfigurationError(f"unknown output kind {self.output_kind!r}")
        if self.activation not in ("tanh", "softplus"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if any(w < 1 for _, w in self.input_blocks) or any(h < 1 for h in self.hidden):
            raise ConfigurationError("all widths must be >= 1")
        if self.output_dim < 1:
            raise ConfigurationError("output_dim must be >= 1")

    @property
    def input_dim(self) -> int:
        return sum(w for _, w in self.input_blocks)

    def layer_sizes(self):
        return [self.input_dim, *self.hidden, self.output_dim]

    def n_params(self) -> int:
        sizes = self.layer_sizes()
        return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_blocks": list(self.input_blocks),
                "hidden": list(self.hidden),
                "output_kind": self.output_kind,
                "output_dim": self.output_dim,
                "activation": self.activation,
                "init_seed": self.init_seed,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "NetworkSpec":
        doc = json.loads(text)
        return NetworkSpec(
            input_blocks=tuple((n, w) for n, w in doc["input_blocks"]),
            hidden=tuple(doc["hidden"]),
            output_kind=doc["output_kind"],
            output_dim=doc["output_dim"],
            activation=doc["activation"],
            init_seed=doc["init_seed"],
        )


def init_params(spec: NetworkSpec) -> np.ndarray:
    """Glorot-scaled weights, zero biases, from the spec's own seed."""
    rng = np.random.default_rng(spec.init_seed)
    sizes = spec.layer_sizes()
    chunks = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        std = np.sqrt(2.0 / (fan_in + fan_out))
        chunks.append(rng.standard_normal(fan_in * fan_out) * std)
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


class MLP:
    """Dense network over concatenated input blocks with explicit backward."""

    def __init__(self, spec: NetworkSpec, params: np.ndarray | None = None):
        self.spec = spec
        self.params = init_params(spec) if params is None else np.array(params, dtype=np.float64)
        if self.params.shape != (spec.n_params(),):
            raise ConfigurationError(
                f"parameter vector length {self.params.shape} != spec count {spec.n_params()}"
            )

    def _layers(self, flat):
        sizes = self.spec.layer_sizes()
        out, off = [], 0
        for i in range(len(sizes) - 1):
            nin, nout = sizes[i], sizes[i + 1]
            W = flat[off : off + nin * nout].reshape(nin, nout)
            off += nin * nout
            b = flat[off : off + nout]
            off += nout
            out.append((W, b))
        return out

    def _concat(self, inputs):
        if isinstance(inputs, np.ndarray):
            inputs = (inputs,)
        blocks = [np.asarray(a, dtype=np.float64) for a in inputs]
        if len(blocks) != len(self.spec.input_blocks):
            raise ConfigurationError(
                f"expected {len(self.spec.input_blocks)} input blocks, got {len(blocks)}"
            )
        squeeze = blocks[0].ndim == 1
        cols = []
        for (name, w), a in zip(self.spec.input_blocks, blocks):
            a = a[None, :] if a.ndim == 1 else a
            if a.shape[1] != w:
                raise ConfigurationError(f"input block {name!r} has width {a.shape[1]}, expected {w}")
            cols.append(a)
        return np.concatenate(cols, axis=1), squeeze

    def forward(self, inputs, want_cache: bool = False):
        """Evaluate the network. inputs: array or tuple of per-block arrays."""
        h, squeeze = self._concat(inputs)
        acts = [h]
        layers = self._layers(self.params)
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            if i < len(layers) - 1:
                h = np.tanh(z) if self.spec.activation == "tanh" else _softplus(z)
            else:
                h = z
            acts.append(h)
        out = h[0] if squeeze else h
        if want_cache:
            return out, {"acts": acts, "squeeze": squeeze}
        return out

    def backward(self, cache, upstream):
        """Reverse pass from d(loss)/d(output).

        Returns (flat parameter gradient, list of per-block input gradients).
        """
        acts = cache["acts"]
        layers = self._layers(self.params)
        g = np.asarray(upstream, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        grads = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            a_in, a_out = acts[i], acts[i + 1]
            if i < len(layers) - 1:
                if self.spec.activation == "tanh":
                    g = g * (1.0 - a_out * a_out)
                else:
                    g = g * (1.0 - np.exp(-a_out))  # sigmoid(z) given softplus output
            grads[i] = (a_in.T @ g, g.sum(axis=0))
            g = g @ W.T
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        input_grads, off = [], 0
        for _, w in self.spec.input_blocks:
            blk = g[:, off : off + w]
            input_grads.append(blk[0] if cache["squeeze"] else blk)
            off += w
        return flat, input_grads

    def input_vjp(self, inputs, upstream):
        """Gradient of <upstream, output> with respect to each input block."""
        _, cache = self.forward(inputs, want_cache=True)
        _, input_grads = self.backward(cache, upstream)
        return input_grads


def _softplus(z):
    return np.logaddexp(0.0, z)


# -- losses -------------------------------------------------------------------


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, labels):
    """Mean cross entropy and its gradient w.r.t. logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B = logits.shape[0]
    lsm = log_softmax(logits)
    loss = -lsm[np.arange(B), labels].mean()
    dlogits = np.exp(lsm)
    dlogits[np.arange(B), labels] -= 1.0
    return loss, dlogits / B


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(step=0, m=np.zeros(n), v=np.zeros(n))


@dataclass(frozen=True)
class Adam:
    """Adaptive-moment optimizer; the package-wide default trainer."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def update(self, params, grad, state: AdamState):
        grad = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            bad = int(np.flatnonzero(~np.isfinite(grad))[0])
            raise NumericalError(f"non-finite gradient (first bad coordinate {bad})")
        step = state.step + 1
        m = self.beta1 * state.m + (1 - self.beta1) * grad
        v = self.beta2 * state.v + (1 - self.beta2) * grad * grad
        mh = m / (1 - self.beta1**step)
        vh = v / (1 - self.beta2**step)
        new_params = params - self.lr * mh / (np.sqrt(vh) + self.eps)
        return new_params, AdamState(step=step, m=m, v=v)


def train_step(net: MLP, grad_flat: np.ndarray, optimizer: Adam, state: AdamState):
    """One optimizer update; returns a new MLP and the advanced state."""
    new_params, new_state = optimizer.update(net.params, grad_flat, state)
    return MLP(net.spec, new_params), new_state


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    spec: NetworkSpec
    parameters: np.ndarray
    training_meta: dict = field(default_factory=dict)

    def build(self) -> MLP:
        return MLP(self.spec, self.parameters)


def loss_trace_digest(losses) -> str:
    arr = np.asarray(losses, dtype=np.float64)
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint: one JSON header line + raw little-endian float64 bytes.

    The container is deterministic byte for byte (unlike zip-based formats),
    so re-training with the same seed reproduces the file exactly.
    """
    header = json.dumps(
        {
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "spec": json.loads(ckpt.spec.to_json()),
            "meta": ckpt.training_meta,
            "n_params": int(ckpt.parameters.size),
        },
        sort_keys=True,
    )
    with open(path, "wb") as f:
        f.write(header.encode())
        f.write(b"\n")
        f.write(np.ascontiguousarray(ckpt.parameters, dtype="<f8").tobytes())


def load_checkpoint(path, expect_config_hash: str | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise ConfigurationError("checkpoint schema version mismatch")
        spec = NetworkSpec.from_json(json.dumps(header["spec"]))
        params = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    meta = header["meta"]
    if params.shape != (spec.n_params(),) or header["n_params"] != spec.n_params():
        raise ConfigurationError("checkpoint parameter count does not match its spec")
    if expect_config_hash is not None and meta.get("config_hash") != expect_config_hash:
        raise ConfigurationError(
            f"checkpoint config hash {meta.get('config_hash')!r} != expected {expect_config_hash!r}"
        )
    return Checkpoint(spec=spec, parameters=params, training_meta=meta)
