"""Minimal neural-network engine with exact per-sample gradients.

Layers: Linear, Conv2d (via patch unfolding), elementwise activations, and
Flatten. The forward pass records, for every trainable layer, the (bias-
augmented) input activations — per-sample rows for linear layers, per-patch
rows for conv layers — and the backward pass records the matching error
signals. Those two recordings are exactly what the KFAC factor estimator and
the DP mechanism consume.

Per-sample gradients are gradients of the *unaveraged* per-sample loss;
averaging happens only inside the privacy mechanism. For linear layers the
per-sample gradient is the rank-1 outer product error x activation and is
kept in factored form; conv per-sample gradients sum patch-level outer
products within each sample (clipping is per example, not per location).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import col2im_kernel, im2col_kernel
from .errors import ContractError
from .rng import Rng


@dataclass(frozen=True)
class Linear:
    in_dim: int
    out_dim: int
    bias: bool = True

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ContractError("linear dims must be positive")

    @property
    def fan_in(self) -> int:
        return self.in_dim


@dataclass(frozen=True)
class Conv2d:
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    pad: int = 0
    bias: bool = True

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.k, self.stride) < 1 or self.pad < 0:
            raise ContractError("conv2d needs positive dims, k, stride and pad >= 0")

    @property
    def fan_in(self) -> int:
        return self.c_in * self.k * self.k


@dataclass(frozen=True)
class Activation:
    kind: str  # "relu" | "tanh"

    def __post_init__(self):
        if self.kind not in ("relu", "tanh"):
            raise ContractError(f"unknown activation {self.kind!r}")


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Linear | Conv2d | Activation | Flatten


def _following_activation(specs, i: int) -> str | None:
    for spec in specs[i + 1 :]:
        if isinstance(spec, Activation):
            return spec.kind
        if isinstance(spec, (Linear, Conv2d)):
            return None
    return None


class Model:
    """Layer stack plus parameters.

    Parameters of trainable layer ``l`` live in one row-major matrix of shape
    (out, fan_in + 1 if bias else fan_in); the trailing column is the bias,
    matching the homogeneous-coordinate convention used for KFAC factors.
    """

    def __init__(self, specs: list[LayerSpec], params: dict[int, np.ndarray]):
        self.specs = list(specs)
        self.params = params
        self.trainable_ids = [
            i for i, s in enumerate(self.specs) if isinstance(s, (Linear, Conv2d))
        ]

    @classmethod
    def initialized(cls, specs: list[LayerSpec], rng: Rng) -> "Model":
        """Gaussian init with variance 2/fan_in before relu, 1/fan_in otherwise;
        biases zero."""
        params = {}
        for i, spec in enumerate(specs):
            if not isinstance(spec, (Linear, Conv2d)):
                continue
            fan_in = spec.fan_in
            out = spec.out_dim if isinstance(spec, Linear) else spec.c_out
            gain = 2.0 if _following_activation(specs, i) == "relu" else 1.0
            w = rng.standard_normal((out, fan_in)) * np.sqrt(gain / fan_in)
            if spec.bias:
                w = np.concatenate([w, np.zeros((out, 1))], axis=1)
            params[i] = w
        return cls(specs, params)

    def copy(self) -> "Model":
        return Model(self.specs, {i: w.copy() for i, w in self.params.items()})

    def num_classes(self) -> int:
        last = self.specs[self.trainable_ids[-1]]
        return last.out_dim if isinstance(last, Linear) else last.c_out

    def param_count(self, layer_id: int) -> int:
        return self.params[layer_id].size

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[i].ravel() for i in self.trainable_ids])

    def set_flat_params(self, vec: np.ndarray) -> None:
        pos = 0
        for i in self.trainable_ids:
            w = self.params[i]
            self.params[i] = vec[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
        if pos != vec.size:
            raise ContractError("flat parameter vector has wrong length")


@dataclass
class Tape:
    """Per-batch record of layer inputs and (after backward) error signals."""

    batch: int
    caches: dict = field(default_factory=dict)
    # trainable layer id -> activation rows as fed to that layer
    acts: dict = field(default_factory=dict)
    # trainable layer id -> error-signal rows (per sample, or per patch for conv)
    deltas: dict = field(default_factory=dict)
    # conv layer id -> rows per sample (spatial positions)
    positions: dict = field(default_factory=dict)


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Patch matrix (B*Ho*Wo, C*k*k) of receptive fields; zero padding outside."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ContractError("im2col expects (B, C, H, W)")
    h, w = x.shape[2], x.shape[3]
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ContractError("kernel larger than padded input")
    return im2col_kernel(x, k, stride, pad)


def _augment(a: np.ndarray, bias: bool) -> np.ndarray:
    if not bias:
        return a
    return np.concatenate([a, np.ones((a.shape[0], 1))], axis=1)


def forward(model: Model, x: np.ndarray):
    """Run the stack; returns (logits, tape) with all activations recorded."""
    a = np.asarray(x, dtype=np.float64)
    tape = Tape(batch=a.shape[0])
    for i, spec in enumerate(model.specs):
        if isinstance(spec, Linear):
            if a.ndim != 2 or a.shape[1] != spec.in_dim:
                raise ContractError(
                    f"layer {i}: expected (B, {spec.in_dim}), got {a.shape}"
                )
            rows = _augment(a, spec.bias)
            tape.acts[i] = rows
            a = rows @ model.params[i].T
        elif isinstance(spec, Conv2d):
            if a.ndim != 4 or a.shape[1] != spec.c_in:
                raise ContractError(
                    f"layer {i}: expected (B, {spec.c_in}, H, W), got {a.shape}"
                )
            b, _, h, w = a.shape
            ho = (h + 2 * spec.pad - spec.k) // spec.stride + 1
            wo = (w + 2 * spec.pad - spec.k) // spec.stride + 1
            if ho < 1 or wo < 1:
                raise ContractError(f"layer {i}: kernel larger than padded input")
            rows = _augment(im2col(a, spec.k, spec.stride, spec.pad), spec.bias)
            tape.acts[i] = rows
            tape.positions[i] = ho * wo
            tape.caches[i] = (a.shape, ho, wo)
            a = (rows @ model.params[i].T).reshape(b, ho, wo, spec.c_out)
            a = a.transpose(0, 3, 1, 2)
        elif isinstance(spec, Activation):
            tape.caches[i] = a
            a = np.maximum(a, 0.0) if spec.kind == "relu" else np.tanh(a)
        elif isinstance(spec, Flatten):
            tape.caches[i] = a.shape
            a = a.reshape(a.shape[0], -1)
    return a, tape


def loss_ce(logits: np.ndarray, labels: np.ndarray):
    """Softmax cross-entropy: (mean loss, per-sample dlogits).

    dlogits rows are softmax(logits) - onehot(label) for the *unaveraged*
    per-sample loss.
    """
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits


class LayerGrads:
    """Per-sample gradients of one trainable layer.

    Linear layers stay factored as (delta, acts) rank-1 pairs; conv layers
    hold the dense per-sample matrices (patch outer products already summed
    within each sample). Both expose the same reductions.
    """

    def __init__(self, layer_id, out_dim, in_aug, delta=None, acts=None, dense=None):
        self.layer_id = layer_id
        self.out_dim = out_dim
        self.in_aug = in_aug
        self.delta = delta
        self.acts = acts
        self._dense = dense

    @property
    def batch(self) -> int:
        return self.delta.shape[0] if self._dense is None else self._dense.shape[0]

    def dense_grads(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense
        return np.einsum("bo,bi->boi", self.delta, self.acts)

    def sq_norms(self) -> np.ndarray:
        if self._dense is None:
            return (self.delta**2).sum(axis=1) * (self.acts**2).sum(axis=1)
        return (self._dense**2).sum(axis=(1, 2))

    def weighted_sum(self, coeff: np.ndarray) -> np.ndarray:
        if self._dense is None:
            return (self.delta * coeff[:, None]).T @ self.acts
        return np.tensordot(coeff, self._dense, axes=(0, 0))

    def transformed(self, u_g, u_a) -> "LayerGrads":
        """Apply g -> U_G g U_A per sample (identity when a factor is None)."""
        if u_g is None and u_a is None:
            return self
        if self._dense is None:
            delta = self.delta if u_g is None else self.delta @ u_g
            acts = self.acts if u_a is None else self.acts @ u_a
            return LayerGrads(self.layer_id, self.out_dim, self.in_aug, delta, acts)
        g = self._dense
        if u_g is not None:
            g = np.matmul(u_g, g)
        if u_a is not None:
            g = np.matmul(g, u_a)
        return LayerGrads(self.layer_id, self.out_dim, self.in_aug, dense=g)


class PerSampleGrads:
    def __init__(self, layers: list[LayerGrads]):
        self.layers = layers

    def __iter__(self):
        return iter(self.layers)

    def sq_norms(self) -> np.ndarray:
        return sum(lg.sq_norms() for lg in self.layers)

    def weighted_sum(self, coeff: np.ndarray) -> list[np.ndarray]:
        return [lg.weighted_sum(coeff) for lg in self.layers]

    def mean(self) -> list[np.ndarray]:
        b = self.layers[0].batch
        return self.weighted_sum(np.full(b, 1.0 / b))


def backward(model: Model, tape: Tape, dlogits: np.ndarray) -> PerSampleGrads:
    """Backpropagate per-sample output gradients through the taped batch.

    Fills ``tape.deltas`` and returns per-sample parameter gradients for every
    trainable layer (order of ``model.trainable_ids``).
    """
    if not tape.acts:
        raise ContractError("backward needs the tape of a prior forward pass")
    g = np.asarray(dlogits, dtype=np.float64)
    grads: dict[int, LayerGrads] = {}
    for i in reversed(range(len(model.specs))):
        spec = model.specs[i]
        if isinstance(spec, Linear):
            rows = tape.acts[i]
            tape.deltas[i] = g
            grads[i] = LayerGrads(i, spec.out_dim, rows.shape[1], delta=g, acts=rows)
            g = g @ model.params[i][:, : spec.in_dim]
        elif isinstance(spec, Conv2d):
            in_shape, ho, wo = tape.caches[i]
            b = in_shape[0]
            dpatch = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, spec.c_out)
            tape.deltas[i] = dpatch
            rows = tape.acts[i]
            dense = np.einsum(
                "bto,bti->boi",
                dpatch.reshape(b, ho * wo, spec.c_out),
                rows.reshape(b, ho * wo, rows.shape[1]),
                optimize=True,
            )
            grads[i] = LayerGrads(i, spec.c_out, rows.shape[1], dense=dense)
            dcols = dpatch @ model.params[i][:, : spec.fan_in]
            g = col2im_kernel(
                np.ascontiguousarray(dcols), in_shape, spec.k, spec.stride, spec.pad
            )
        elif isinstance(spec, Activation):
            s = tape.caches[i]
            if spec.kind == "relu":
                g = g * (s > 0)
            else:
                t = np.tanh(s)
                g = g * (1.0 - t * t)
        elif isinstance(spec, Flatten):
            g = g.reshape(tape.caches[i])
    return PerSampleGrads([grads[i] for i in model.trainable_ids])


def batch_grad(model: Model, x: np.ndarray, y: np.ndarray):
    """(mean loss, flat gradient of the mean loss) - plumbing for HVPs."""
    logits, tape = forward(model, x)
    loss, dlogits = loss_ce(logits, y)
    psg = backward(model, tape, dlogits)
    return loss, np.concatenate([g.ravel() for g in psg.mean()])


# ---------------------------------------------------------------------------
# layer-spec (de)serialization and model checkpoints


def spec_to_dict(spec: LayerSpec) -> dict:
    if isinstance(spec, Linear):
        return {"type": "linear", "in": spec.in_dim, "out": spec.out_dim, "bias": spec.bias}
    if isinstance(spec, Conv2d):
        return {
            "type": "conv2d",
            "c_in": spec.c_in,
            "c_out": spec.c_out,
            "k": spec.k,
            "stride": spec.stride,
            "pad": spec.pad,
            "bias": spec.bias,
        }
    if isinstance(spec, Activation):
        return {"type": spec.kind}
    return {"type": "flatten"}


def spec_from_dict(d: dict) -> LayerSpec:
    t = d.get("type")
    if t == "linear":
        return Linear(d["in"], d["out"], d.get("bias", True))
    if t == "conv2d":
        return Conv2d(
            d["c_in"], d["c_out"], d["k"], d.get("stride", 1), d.get("pad", 0), d.get("bias", True)
        )
    if t in ("relu", "tanh"):
        return Activation(t)
    if t == "flatten":
        return Flatten()
    raise ContractError(f"unknown layer type {t!r}")


def save_model(model: Model, path: str) -> None:
    from . import container

    meta = {"specs": [spec_to_dict(s) for s in model.specs]}
    arrays = {f"w_{i}": model.params[i] for i in model.trainable_ids}
    container.write_container(path, "model", meta, arrays)


def load_model(path: str) -> Model:
    from . import container

    kind, meta, arrays = container.read_container(path)
    if kind != "model":
        raise ContractError(f"{path}: expected a model container, got {kind!r}")
    specs = [spec_from_dict(d) for d in meta["specs"]]
    params = {
        i: arrays[f"w_{i}"]
        for i, s in enumerate(specs)
        if isinstance(s, (Linear, Conv2d))
    }
    return Model(specs, params)
