"""KFAC preconditioner construction from probe batches.

One refresh estimates per-layer activation / error-signal covariances from a
probe batch (synthetic noise by default; a configured dataset or a private
oracle batch for the comparison arms), damps them, eigendecomposes, and
freezes the inverse-square-root factors. The frozen state is immutable and
is applied to per-sample gradients before clipping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container, nn
from .errors import ContractError
from .linalg import inv_sqrt_from_eig, sym_eig
from .probes import PinkNoiseSpec, TokenNoiseSpec, gen_labels, gen_pink_noise
from .rng import Rng


@dataclass(frozen=True)
class PinkProbe:
    channels: int
    height: int
    width: int
    alpha: float = 1.0
    eps0: float = 1e-6
    kind: str = field(default="synthetic-pink", init=False)


@dataclass(frozen=True)
class TokenProbe:
    spec: TokenNoiseSpec
    kind: str = field(default="synthetic-token", init=False)


@dataclass
class DatasetProbe:
    """Probe rows sampled from a configured (public proxy) dataset."""

    x: np.ndarray
    y: np.ndarray
    name: str = "dataset"
    kind: str = field(default="dataset", init=False)


@dataclass
class OracleProbe:
    """A fixed private batch; anything built from it is stamped non-private."""

    x: np.ndarray
    y: np.ndarray
    kind: str = field(default="private-oracle", init=False)


@dataclass
class KfacConfig:
    probe: object
    probe_batch: int = 64
    damping: float = 1e-3  # pi: added to the covariances
    gamma: float = 1e-2  # stability: added to eigenvalues before inversion
    refresh_period: int = 50
    skip_dim_cap: int = 4096
    eig_backend: str | None = None

    def __post_init__(self):
        if self.probe_batch < 1 or self.refresh_period < 1:
            raise ContractError("probe_batch and refresh_period must be >= 1")
        if self.gamma <= 0:
            raise ContractError("gamma must be positive")
        if self.damping < 0:
            raise ContractError("damping must be >= 0")


@dataclass
class KfacLayerState:
    layer_id: int
    u_a: np.ndarray | None
    u_g: np.ndarray | None
    eig_a: np.ndarray | None
    eig_g: np.ndarray | None
    identity: bool = False


@dataclass
class KfacState:
    layers: dict[int, KfacLayerState]
    source: str
    non_private_source: bool = False
    creation_step: int = -1

    def transform(self, grads: nn.PerSampleGrads) -> nn.PerSampleGrads:
        out = []
        for lg in grads:
            st = self.layers[lg.layer_id]
            out.append(lg if st.identity else lg.transformed(st.u_g, st.u_a))
        return nn.PerSampleGrads(out)


def kfac_reduce_pool(acts: np.ndarray) -> np.ndarray:
    """Pool a shared dimension into the sample axis: (B, T, d) -> (B*T, d).

    Rows come out batch-major, position-minor, so the covariance of the
    output equals the average of per-position covariances.
    """
    acts = np.asarray(acts)
    if acts.ndim != 3:
        raise ContractError("kfac_reduce_pool expects (B, T, d)")
    b, t, d = acts.shape
    return np.ascontiguousarray(acts.reshape(b * t, d))


def estimate_factors(model: nn.Model, probe_x, probe_y, damping: float = 0.0):
    """Per-layer (A_hat, G_hat) covariances from one probe batch.

    Linear layers average per-sample rows; conv layers average im2col patch
    rows (each spatial position counts as a sample). ``damping`` is added to
    the diagonal of both factors.
    """
    logits, tape = nn.forward(model, probe_x)
    _, dlogits = nn.loss_ce(logits, probe_y)
    nn.backward(model, tape, dlogits)
    factors = {}
    for i in model.trainable_ids:
        rows = tape.acts[i]
        if rows.ndim == 3:
            rows = kfac_reduce_pool(rows)
        deltas = tape.deltas[i]
        n = rows.shape[0]
        a_hat = rows.T @ rows / n
        g_hat = deltas.T @ deltas / n
        if damping:
            a_hat[np.diag_indices_from(a_hat)] += damping
            g_hat[np.diag_indices_from(g_hat)] += damping
        factors[i] = (a_hat, g_hat)
    return factors


def build_preconditioner(
    a_hat: np.ndarray,
    g_hat: np.ndarray,
    gamma: float,
    layer_id: int = -1,
    eig_backend: str | None = None,
) -> KfacLayerState:
    """Inverse-square-root factors U = Q (L + gamma I)^{-1/2} Q^T per side."""
    e_a = sym_eig(a_hat, backend=eig_backend)
    e_g = sym_eig(g_hat, backend=eig_backend)
    return KfacLayerState(
        layer_id=layer_id,
        u_a=inv_sqrt_from_eig(e_a, gamma),
        u_g=inv_sqrt_from_eig(e_g, gamma),
        eig_a=e_a.values,
        eig_g=e_g.values,
    )


def precondition_grad(g: np.ndarray, state: KfacLayerState) -> np.ndarray:
    """Apply the frozen transform U_G g U_A to one gradient matrix."""
    if state.identity:
        return g
    if g.shape != (state.u_g.shape[0], state.u_a.shape[0]):
        raise ContractError(
            f"gradient shape {g.shape} does not compose with factors "
            f"{state.u_g.shape} x {state.u_a.shape}"
        )
    return state.u_g @ g @ state.u_a


def make_probe_batch(model: nn.Model, config: KfacConfig, rng: Rng):
    """Draw one probe batch (x, y) for the configured source."""
    probe = config.probe
    m = config.probe_batch
    if isinstance(probe, PinkProbe):
        spec = PinkNoiseSpec(
            batch=m,
            channels=probe.channels,
            height=probe.height,
            width=probe.width,
            alpha=probe.alpha,
            eps0=probe.eps0,
        )
        x = gen_pink_noise(spec, rng)
        first = model.specs[model.trainable_ids[0]]
        if isinstance(first, nn.Linear):
            x = x.reshape(m, -1)
        y = gen_labels(m, model.num_classes(), rng)
        return x, y
    if isinstance(probe, TokenProbe):
        raise ContractError(
            "token probes need an embedding front end, which this layer stack "
            "does not have; use them with estimate_factors on embedded rows"
        )
    if isinstance(probe, DatasetProbe):
        n = probe.x.shape[0]
        idx = rng.permutation(n)[: min(m, n)]
        return probe.x[idx], probe.y[idx]
    if isinstance(probe, OracleProbe):
        return probe.x, probe.y
    raise ContractError(f"unknown probe source {probe!r}")


def probe_descriptor(config: KfacConfig) -> str:
    p = config.probe
    if isinstance(p, PinkProbe):
        return f"synthetic-pink(alpha={p.alpha})"
    if isinstance(p, TokenProbe):
        return "synthetic-token"
    if isinstance(p, DatasetProbe):
        return f"dataset({p.name})"
    return "private-oracle"


def refresh(model: nn.Model, config: KfacConfig, rng: Rng) -> KfacState:
    """Run one full preconditioner construction pass over a probe batch."""
    x, y = make_probe_batch(model, config, rng)
    factors = estimate_factors(model, x, y, damping=config.damping)
    layers = {}
    for i, (a_hat, g_hat) in factors.items():
        if max(a_hat.shape[0], g_hat.shape[0]) > config.skip_dim_cap:
            layers[i] = KfacLayerState(i, None, None, None, None, identity=True)
            continue
        st = build_preconditioner(
            a_hat, g_hat, config.gamma, layer_id=i, eig_backend=config.eig_backend
        )
        layers[i] = st
    probe = config.probe
    return KfacState(
        layers=layers,
        source=probe_descriptor(config),
        non_private_source=isinstance(probe, OracleProbe),
    )


def identity_state(model: nn.Model) -> KfacState:
    layers = {
        i: KfacLayerState(i, None, None, None, None, identity=True)
        for i in model.trainable_ids
    }
    return KfacState(layers=layers, source="identity")


def save_state(state: KfacState, path: str) -> None:
    arrays = {}
    meta = {
        "creation_step": state.creation_step,
        "source": state.source,
        "non_private_source": state.non_private_source,
        "layers": [],
    }
    for i, st in sorted(state.layers.items()):
        meta["layers"].append({"layer_id": i, "identity": st.identity})
        if not st.identity:
            arrays[f"u_a_{i}"] = st.u_a
            arrays[f"u_g_{i}"] = st.u_g
            arrays[f"eig_a_{i}"] = st.eig_a
            arrays[f"eig_g_{i}"] = st.eig_g
    container.write_container(path, "kfac-state", meta, arrays)


def load_state(path: str) -> KfacState:
    kind, meta, arrays = container.read_container(path)
    if kind != "kfac-state":
        raise ValueError(f"{path}: expected a kfac-state container, got {kind!r}")
    layers = {}
    for entry in meta["layers"]:
        i = entry["layer_id"]
        if entry["identity"]:
            layers[i] = KfacLayerState(i, None, None, None, None, identity=True)
        else:
            layers[i] = KfacLayerState(
                i,
                arrays[f"u_a_{i}"],
                arrays[f"u_g_{i}"],
                arrays[f"eig_a_{i}"],
                arrays[f"eig_g_{i}"],
            )
    state = KfacState(
        layers=layers,
        source=meta["source"],
        non_private_source=meta["non_private_source"],
    )
    state.creation_step = meta["creation_step"]
    return state
