"""Private training loop: per-sample gradients, optional frozen KFAC
transform, global clipping, Gaussian noising of the sum, averaged descent
with momentum, and per-step privacy accounting.

Methods: ``dpsgd`` (no transform) and ``dpkfc`` (periodic preconditioner
refresh from the configured probe source). A state is only ever applied at a
step at or after its creation step, and refreshes happen before the step's
batch is sampled, so the transform is independent of the batch it touches -
the precondition of the privacy guarantee.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics, dp, kfac, nn
from .data import Dataset
from .errors import ContractError
from .rng import Rng


@dataclass
class TrackingConfig:
    """Factor-alignment tracking against a fixed private oracle batch."""

    oracle_batch: int = 64
    proxy: kfac.DatasetProbe | None = None
    synthetic: kfac.PinkProbe | None = None


@dataclass
class TrainConfig:
    method: str = "dpsgd"  # "dpsgd" | "dpkfc"
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 1
    batch: int = 256  # expected (Poisson) batch size
    seed: int = 0
    eval_every: int = 50
    clip: float = 1.0
    sigma: float | None = None
    target_epsilon: float | None = None
    delta: float | None = None  # defaults to 1/N
    kfac: kfac.KfacConfig | None = None
    log_snr: bool = True
    tracking: TrackingConfig | None = None

    def __post_init__(self):
        if self.method not in ("dpsgd", "dpkfc"):
            raise ContractError(f"unknown method {self.method!r}")
        if self.method == "dpkfc" and self.kfac is None:
            raise ContractError("dpkfc needs a kfac config")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ContractError("need lr > 0 and momentum in [0, 1)")
        if (self.sigma is None) == (self.target_epsilon is None):
            raise ContractError("give exactly one of sigma / target_epsilon")


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    alignment: list = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)
    final_epsilon: float = 0.0
    final_accuracy: float = float("nan")
    sigma: float = 0.0
    non_private: bool = False
    delta: float = 0.0
    final_state: object = None  # last KfacState (dpkfc runs)

    def write_csv(self, path: str) -> None:
        from .cli import write_csv  # shared CSV dialect

        cols = ["step", "loss", "test_acc", "epsilon", "realized_batch"]
        n_snr = max((len(r.get("snr", [])) for r in self.rows), default=0)
        cols += [f"snr_{i}" for i in range(n_snr)]
        table = []
        for r in self.rows:
            row = [r["step"], r["loss"], r.get("test_acc"), r["epsilon"], r["realized_batch"]]
            snr = r.get("snr", [])
            row += list(snr) + [None] * (n_snr - len(snr))
            table.append(row)
        write_csv(path, cols, table)

    def write_alignment_csv(self, path: str) -> None:
        from .cli import write_csv

        cols = ["step", "source", "layer", "factor", "cosine", "rel_frob", "rel_frob_unitnorm"]
        write_csv(path, cols, [[r[c] for c in cols] for r in self.alignment])

    def summary(self) -> dict:
        return {
            "final_epsilon": self.final_epsilon,
            "final_accuracy": self.final_accuracy,
            "sigma": self.sigma,
            "steps": len(self.rows),
            "non_private": self.non_private,
            "config": self.config_echo,
        }


def evaluate(model: nn.Model, x: np.ndarray, y: np.ndarray, chunk: int = 512) -> float:
    """Fraction of argmax-correct predictions (ties resolve to the lowest
    class index)."""
    if x.shape[0] == 0:
        raise ContractError("evaluate needs a non-empty split")
    hits = 0
    for i in range(0, x.shape[0], chunk):
        logits, _ = nn.forward(model, x[i : i + chunk])
        hits += int((logits.argmax(axis=1) == y[i : i + chunk]).sum())
    return hits / x.shape[0]


def train_step(
    model: nn.Model,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    state: kfac.KfacState | None,
    params: dp.PrivacyParams,
    lr: float,
    momentum: float,
    velocity: dict,
    noise_rng: Rng,
    expected_batch: int,
    step: int,
):
    """One private update; returns (loss or nan, sum of clipped gradients)."""
    if state is not None and state.creation_step > step:
        raise ContractError(
            f"preconditioner from step {state.creation_step} used at step {step}: "
            "it must predate the batch it transforms"
        )
    realized = batch_x.shape[0]
    if realized > 0:
        logits, tape = nn.forward(model, batch_x)
        loss, dlogits = nn.loss_ce(logits, batch_y)
        psg = nn.backward(model, tape, dlogits)
        if state is not None:
            psg = state.transform(psg)
        coeff, _ = dp.clip_coefficients(psg.sq_norms(), params.clip)
        sums = psg.weighted_sum(coeff)
    else:
        loss = float("nan")
        sums = [np.zeros_like(model.params[i]) for i in model.trainable_ids]
    update = dp.privatize(sums, expected_batch, params, noise_rng)
    for layer_id, u in zip(model.trainable_ids, update):
        v = velocity[layer_id]
        v *= momentum
        v += u
        model.params[layer_id] -= lr * v
    return loss, sums


def train(model: nn.Model, dataset: Dataset, config: TrainConfig):
    """Run the full loop; returns (model, RunRecord). Deterministic in
    config.seed."""
    n = dataset.n_train
    if n < 1:
        raise ContractError("dataset has no training rows")
    if config.batch > n:
        raise ContractError("expected batch larger than the training split")
    q = config.batch / n
    steps_total = config.epochs * math.ceil(n / config.batch)
    delta = config.delta if config.delta is not None else 1.0 / n
    if config.target_epsilon is not None:
        sigma = dp.calibrate_sigma(config.target_epsilon, delta, q, steps_total)
    else:
        sigma = config.sigma
    params = dp.PrivacyParams(clip=config.clip, sigma=sigma, sample_rate=q, delta=delta)

    root = Rng(config.seed)
    batch_rng = root.child(0)
    noise_rng = root.child(1)
    probe_rng = root.child(2)
    track_rng = root.child(3)

    accountant = dp.AccountantState()
    velocity = {i: np.zeros_like(model.params[i]) for i in model.trainable_ids}
    train_x, train_y = dataset.train_x, dataset.train_y
    has_test = len(dataset.test_idx) > 0

    tracking = config.tracking
    oracle_probe = None
    if tracking is not None:
        idx = track_rng.permutation(n)[: tracking.oracle_batch]
        oracle_probe = kfac.OracleProbe(x=train_x[idx], y=train_y[idx])

    record = RunRecord(sigma=sigma, non_private=params.non_private)
    state = None
    refresh_count = 0
    for t in range(steps_total):
        if config.method == "dpkfc" and t % config.kfac.refresh_period == 0:
            state = kfac.refresh(model, config.kfac, probe_rng.child(refresh_count))
            state.creation_step = t
            refresh_count += 1
        mask = batch_rng.uniform(size=n) < q
        bx, by = train_x[mask], train_y[mask]
        loss, sums = train_step(
            model, bx, by, state, params, config.lr, config.momentum,
            velocity, noise_rng, config.batch, t,
        )
        if params.non_private:
            eps = float("inf")
        else:
            accountant.step(q, sigma)
            eps, _ = dp.epsilon_of(accountant, delta)
        row = {
            "step": t,
            "loss": loss,
            "epsilon": eps if math.isfinite(eps) else None,
            "realized_batch": int(bx.shape[0]),
        }
        at_eval = (t % config.eval_every == config.eval_every - 1) or t == steps_total - 1
        if at_eval:
            if has_test:
                row["test_acc"] = evaluate(model, dataset.test_x, dataset.test_y)
            if config.log_snr and sigma > 0:
                mean_clipped = [s / config.batch for s in sums]
                row["snr"] = diagnostics.layer_snr(
                    mean_clipped, sigma, config.clip, config.batch
                )
            if tracking is not None:
                record.alignment += _alignment_rows(
                    model, config, tracking, oracle_probe, track_rng.child(t + 1), t
                )
        record.rows.append(row)

    record.final_epsilon = record.rows[-1]["epsilon"] or float("inf")
    record.final_accuracy = record.rows[-1].get("test_acc", float("nan"))
    record.delta = delta
    record.final_state = state
    if state is not None and state.non_private_source:
        record.non_private = True
    return model, record


def _alignment_rows(model, config, tracking, oracle_probe, rng, step):
    """Factor alignment of each candidate source against the private oracle."""
    pi = config.kfac.damping if config.kfac is not None else 1e-3
    oracle = kfac.estimate_factors(model, oracle_probe.x, oracle_probe.y, damping=pi)
    sources = {}
    synth = tracking.synthetic
    if synth is None and config.kfac is not None and isinstance(config.kfac.probe, kfac.PinkProbe):
        synth = config.kfac.probe
    if synth is not None:
        m = config.kfac.probe_batch if config.kfac is not None else 64
        cfg = kfac.KfacConfig(probe=synth, probe_batch=m)
        sources["synthetic"] = kfac.make_probe_batch(model, cfg, rng.child(0))
    if tracking.proxy is not None:
        cfg = kfac.KfacConfig(probe=tracking.proxy, probe_batch=oracle_probe.x.shape[0])
        sources["proxy"] = kfac.make_probe_batch(model, cfg, rng.child(1))
    rows = []
    for name, (x, y) in sources.items():
        cand = kfac.estimate_factors(model, x, y, damping=pi)
        rows += diagnostics.factor_alignment_rows(oracle, cand, name, step)
    return rows
