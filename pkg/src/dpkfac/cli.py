"""Operator surface: config validation, dataset construction, subcommand
dispatch, and result emission.

One JSON config file drives every task; CLI overrides use ``key.path=value``
with JSON-parsed values. Every run echoes its fully resolved config (defaults
included) and seed into the output directory, and all files are written
atomically (temp file + rename), so an interrupted run leaves no partial
outputs.
"""

from __future__ import annotations

import argparse
import copy
import io
import json
import math
import os
import sys

import numpy as np

from . import __version__, data, diagnostics, dp, kfac, nn, probes, trainer
from .container import atomic_write_bytes, atomic_write_text
from .linalg import sym_eig
from .rng import Rng

TASKS = ("train", "accountant", "diagnose", "probe-spectrum", "gen-noise")


class ConfigError(ValueError):
    def __init__(self, violations):
        super().__init__("invalid config:\n" + "\n".join(f"- {v}" for v in violations))
        self.violations = list(violations)


# ---------------------------------------------------------------------------
# schema

_DATASET_BLOBS = {
    "type": "object",
    "properties": {
        "kind": {"const": "blobs"},
        "n": {"type": "integer", "minimum": 2},
        "dim": {"type": "integer", "minimum": 1},
        "classes": {"type": "integer", "minimum": 2},
        "noise": {"type": "number", "minimum": 0},
        "seed": {"type": "integer"},
        "image_shape": {
            "type": "array",
            "items": {"type": "integer", "minimum": 1},
            "minItems": 3,
            "maxItems": 3,
        },
    },
    "required": ["kind", "n", "dim", "classes", "noise", "seed"],
    "additionalProperties": False,
}

_DATASET_IDX = {
    "type": "object",
    "properties": {
        "kind": {"const": "idx"},
        "train_images": {"type": "string"},
        "train_labels": {"type": "string"},
        "test_images": {"type": "string"},
        "test_labels": {"type": "string"},
        "num_classes": {"type": "integer", "minimum": 2},
        "subsample": {"type": "integer", "minimum": 1},
        "subsample_seed": {"type": "integer"},
    },
    "required": ["kind", "train_images", "train_labels"],
    "additionalProperties": False,
}

_DATASET = {"oneOf": [_DATASET_BLOBS, _DATASET_IDX]}

_LAYER = {
    "oneOf": [
        {
            "type": "object",
            "properties": {
                "type": {"const": "linear"},
                "in": {"type": "integer", "minimum": 1},
                "out": {"type": "integer", "minimum": 1},
                "bias": {"type": "boolean"},
            },
            "required": ["type", "in", "out"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "type": {"const": "conv2d"},
                "c_in": {"type": "integer", "minimum": 1},
                "c_out": {"type": "integer", "minimum": 1},
                "k": {"type": "integer", "minimum": 1},
                "stride": {"type": "integer", "minimum": 1},
                "pad": {"type": "integer", "minimum": 0},
                "bias": {"type": "boolean"},
            },
            "required": ["type", "c_in", "c_out", "k"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {"type": {"enum": ["relu", "tanh", "flatten"]}},
            "required": ["type"],
            "additionalProperties": False,
        },
    ]
}

_PROBE = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["pink", "dataset", "oracle"]},
        "alpha": {"type": "number", "minimum": 0},
        "eps0": {"type": "number", "exclusiveMinimum": 0},
        "channels": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "dataset": _DATASET,
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_KFAC = {
    "type": "object",
    "properties": {
        "probe_batch": {"type": "integer", "minimum": 1},
        "damping": {"type": "number", "minimum": 0},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "refresh_period": {"type": "integer", "minimum": 1},
        "skip_dim_cap": {"type": "integer", "minimum": 1},
        "probe": _PROBE,
    },
    "additionalProperties": False,
}

_SCHEMA = {
    "type": "object",
    "properties": {
        "task": {"enum": list(TASKS)},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "dataset": _DATASET,
        "model": {"type": "array", "items": _LAYER, "minItems": 1},
        "train": {
            "type": "object",
            "properties": {
                "method": {"enum": ["dpsgd", "dpkfc"]},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "batch": {"type": "integer", "minimum": 1},
                "eval_every": {"type": "integer", "minimum": 1},
                "log_snr": {"type": "boolean"},
                "tracking": {
                    "type": "object",
                    "properties": {
                        "oracle_batch": {"type": "integer", "minimum": 1},
                        "proxy": _DATASET,
                    },
                    "additionalProperties": False,
                },
            },
            "required": ["method"],
            "additionalProperties": False,
        },
        "privacy": {
            "type": "object",
            "properties": {
                "clip": {"type": "number", "exclusiveMinimum": 0},
                "sigma": {"type": "number", "minimum": 0},
                "target_epsilon": {"type": "number", "exclusiveMinimum": 0},
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
            "required": ["clip"],
            "additionalProperties": False,
        },
        "kfac": _KFAC,
        "accountant": {
            "type": "object",
            "properties": {
                "q": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "batch": {"type": "integer", "minimum": 1},
                "n": {"type": "integer", "minimum": 1},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "target_epsilon": {"type": "number", "exclusiveMinimum": 0},
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "steps": {"type": "integer", "minimum": 1},
            },
            "required": ["delta", "steps"],
            "additionalProperties": False,
        },
        "noise": {
            "type": "object",
            "properties": {
                "batch": {"type": "integer", "minimum": 1},
                "channels": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 1},
                "width": {"type": "integer", "minimum": 1},
                "alpha": {"type": "number", "minimum": 0},
                "eps0": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["height", "width"],
            "additionalProperties": False,
        },
        "diagnose": {
            "type": "object",
            "properties": {
                "checkpoint": {"type": "string"},
                "probe_batch": {"type": "integer", "minimum": 1},
                "damping": {"type": "number", "minimum": 0},
                "sources": {"type": "array", "items": _PROBE, "minItems": 1},
            },
            "required": ["sources"],
            "additionalProperties": False,
        },
    },
    "required": [],
    "additionalProperties": False,
}


def validate_config(cfg: dict) -> None:
    """Schema-check a config, reporting every violation (not just the first)."""
    import jsonschema

    validator = jsonschema.Draft202012Validator(_SCHEMA)
    violations = []
    for err in sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path)):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        violations.append(f"{where}: {err.message}")
    if violations:
        raise ConfigError(violations)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` overrides; values are parsed as JSON when
    possible, kept as strings otherwise."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not of the form key.path=value"])
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        keys = path.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {item!r} descends into a non-object"])
        node[keys[-1]] = value
    return cfg


# ---------------------------------------------------------------------------
# CSV dialect: comma-separated, header row, '.' decimal, 17 significant digits


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return format(v, ".17g")
    if isinstance(v, (np.floating,)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: str, columns: list[str], rows) -> None:
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# config resolution helpers


def build_dataset(dcfg: dict) -> data.Dataset:
    if dcfg["kind"] == "blobs":
        shape = tuple(dcfg["image_shape"]) if "image_shape" in dcfg else None
        return data.gen_blobs(
            dcfg["n"], dcfg["dim"], dcfg["classes"], dcfg["noise"], dcfg["seed"],
            image_shape=shape,
        )
    train = data.load_idx(
        dcfg["train_images"], dcfg["train_labels"], dcfg.get("num_classes", 10)
    )
    if "test_images" in dcfg:
        test = data.load_idx(
            dcfg["test_images"], dcfg["test_labels"], dcfg.get("num_classes", 10)
        )
        ds = data.merge_splits(train, test)
    else:
        ds = train
    if "subsample" in dcfg:
        ds = data.subsample_train(ds, dcfg["subsample"], dcfg.get("subsample_seed", 0))
    return ds


def build_model(cfg: dict, seed: int) -> nn.Model:
    specs = [nn.spec_from_dict(d) for d in cfg["model"]]
    return nn.Model.initialized(specs, Rng(seed).child(100))


def _probe_dims(dataset: data.Dataset):
    if dataset.x.ndim == 4:
        return dataset.x.shape[1], dataset.x.shape[2], dataset.x.shape[3]
    return 1, 1, dataset.x.shape[1]


def build_probe(pcfg: dict, dataset: data.Dataset | None):
    kind = pcfg["kind"]
    if kind == "pink":
        if all(k in pcfg for k in ("channels", "height", "width")):
            c, h, w = pcfg["channels"], pcfg["height"], pcfg["width"]
        elif dataset is not None:
            c, h, w = _probe_dims(dataset)
        else:
            raise ConfigError(["probe: pink probes need channels/height/width or a dataset"])
        return kfac.PinkProbe(
            channels=c, height=h, width=w,
            alpha=pcfg.get("alpha", 1.0), eps0=pcfg.get("eps0", 1e-6),
        )
    if kind == "dataset":
        if "dataset" not in pcfg:
            raise ConfigError(["probe: dataset probes need a dataset block"])
        ds = build_dataset(pcfg["dataset"])
        return kfac.DatasetProbe(x=ds.train_x, y=ds.train_y, name=ds.name)
    if dataset is None:
        raise ConfigError(["probe: oracle probes need the main dataset"])
    return kfac.OracleProbe(x=dataset.train_x, y=dataset.train_y)


def build_kfac_config(cfg: dict, dataset: data.Dataset | None) -> kfac.KfacConfig:
    kcfg = cfg.get("kfac", {})
    pcfg = kcfg.get("probe", {"kind": "pink"})
    probe = build_probe(pcfg, dataset)
    return kfac.KfacConfig(
        probe=probe,
        probe_batch=kcfg.get("probe_batch", 64),
        damping=kcfg.get("damping", 1e-3),
        gamma=kcfg.get("gamma", 1e-2),
        refresh_period=kcfg.get("refresh_period", 50),
        skip_dim_cap=kcfg.get("skip_dim_cap", 4096),
    )


def resolve_output_dir(cfg: dict) -> str:
    out = cfg.get("output_dir", "runs/out")
    root = os.environ.get("DPKFAC_OUTPUT_ROOT")
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    os.makedirs(out, exist_ok=True)
    return out


def _echo_config(cfg: dict, outdir: str, resolved: dict) -> None:
    doc = {"config": cfg, "resolved": resolved, "version": __version__}
    atomic_write_text(os.path.join(outdir, "config_resolved.json"), json.dumps(doc, indent=2))


# ---------------------------------------------------------------------------
# tasks


def _task_train(cfg: dict) -> int:
    outdir = resolve_output_dir(cfg)
    dataset = build_dataset(cfg["dataset"])
    seed = cfg.get("seed", 0)
    model = build_model(cfg, seed)
    tcfg_raw = cfg["train"]
    pcfg = cfg["privacy"]
    kconf = build_kfac_config(cfg, dataset) if tcfg_raw["method"] == "dpkfc" else None
    tracking = None
    if "tracking" in tcfg_raw:
        tr = tcfg_raw["tracking"]
        proxy = None
        if "proxy" in tr:
            pds = build_dataset(tr["proxy"])
            proxy = kfac.DatasetProbe(x=pds.train_x, y=pds.train_y, name=pds.name)
        tracking = trainer.TrackingConfig(
            oracle_batch=tr.get("oracle_batch", 64), proxy=proxy
        )
    tconf = trainer.TrainConfig(
        method=tcfg_raw["method"],
        lr=tcfg_raw.get("lr", 1e-3),
        momentum=tcfg_raw.get("momentum", 0.9),
        epochs=tcfg_raw.get("epochs", 1),
        batch=tcfg_raw.get("batch", 256),
        seed=seed,
        eval_every=tcfg_raw.get("eval_every", 50),
        clip=pcfg["clip"],
        sigma=pcfg.get("sigma"),
        target_epsilon=pcfg.get("target_epsilon"),
        delta=pcfg.get("delta"),
        kfac=kconf,
        log_snr=tcfg_raw.get("log_snr", True),
        tracking=tracking,
    )
    model, record = trainer.train(model, dataset, tconf)
    record.config_echo = cfg
    record.write_csv(os.path.join(outdir, "run.csv"))
    if record.alignment:
        record.write_alignment_csv(os.path.join(outdir, "alignment.csv"))
    nn.save_model(model, os.path.join(outdir, "model.ckpt"))
    if record.final_state is not None:
        kfac.save_state(record.final_state, os.path.join(outdir, "kfac_state.ckpt"))
    atomic_write_text(
        os.path.join(outdir, "summary.json"),
        json.dumps({**record.summary(), "seed": seed}, indent=2, default=str),
    )
    resolved = {
        "method": tconf.method, "lr": tconf.lr, "momentum": tconf.momentum,
        "epochs": tconf.epochs, "batch": tconf.batch, "eval_every": tconf.eval_every,
        "clip": tconf.clip, "sigma": record.sigma, "delta": record.delta,
        "seed": seed, "non_private": record.non_private,
    }
    if kconf is not None:
        resolved["kfac"] = {
            "probe": kfac.probe_descriptor(kconf), "probe_batch": kconf.probe_batch,
            "damping": kconf.damping, "gamma": kconf.gamma,
            "refresh_period": kconf.refresh_period, "skip_dim_cap": kconf.skip_dim_cap,
        }
    _echo_config(cfg, outdir, resolved)
    print(
        f"train: {len(record.rows)} steps, final eps={record.final_epsilon:.4g}, "
        f"final acc={record.final_accuracy:.4f} -> {outdir}"
    )
    return 0


def _task_accountant(cfg: dict) -> int:
    acfg = cfg["accountant"]
    if "q" in acfg:
        q = acfg["q"]
    elif "batch" in acfg and "n" in acfg:
        q = acfg["batch"] / acfg["n"]
    else:
        raise ConfigError(["accountant: give q or batch+n"])
    delta, steps = acfg["delta"], acfg["steps"]
    if "sigma" in acfg:
        sigma = acfg["sigma"]
    elif "target_epsilon" in acfg:
        sigma = dp.calibrate_sigma(acfg["target_epsilon"], delta, q, steps)
    else:
        raise ConfigError(["accountant: give sigma or target_epsilon"])
    state = dp.AccountantState()
    state.step(q, sigma, count=steps)
    eps, order = dp.epsilon_of(state, delta)
    print(f"epsilon={eps:.17g} sigma={sigma:.17g} best_order={order}")
    cols = ["order", "rdp_per_step", "rdp_total", "epsilon_at_order"]
    rows = []
    per_step = dp.rdp_vector(q, sigma, state.orders)
    for i, a in enumerate(state.orders):
        rows.append(
            [a, per_step[i], state.rdp[i], state.rdp[i] + math.log(1 / delta) / (a - 1)]
        )
    print(",".join(cols))
    for r in rows:
        print(",".join(_fmt(v) for v in r))
    if "output_dir" in cfg:
        outdir = resolve_output_dir(cfg)
        write_csv(os.path.join(outdir, "rdp_orders.csv"), cols, rows)
        _echo_config(cfg, outdir, {"q": q, "sigma": sigma, "epsilon": eps, "best_order": order})
    return 0


def _task_gen_noise(cfg: dict) -> int:
    outdir = resolve_output_dir(cfg)
    ncfg = cfg["noise"]
    seed = cfg.get("seed", 0)
    spec = probes.PinkNoiseSpec(
        batch=ncfg.get("batch", 32),
        channels=ncfg.get("channels", 1),
        height=ncfg["height"],
        width=ncfg["width"],
        alpha=ncfg.get("alpha", 1.0),
        eps0=ncfg.get("eps0", 1e-6),
    )
    x = probes.gen_pink_noise(spec, Rng(seed).child(7))
    buf = io.BytesIO()
    np.save(buf, x)
    atomic_write_bytes(os.path.join(outdir, "noise.npy"), buf.getvalue())
    radii, power = probes.radial_power_spectrum(x)
    slope = probes.fit_log_slope(radii, power)
    write_csv(
        os.path.join(outdir, "spectrum.csv"),
        ["radius", "power"],
        list(zip(radii, power)),
    )
    atomic_write_text(
        os.path.join(outdir, "summary.json"),
        json.dumps({"alpha": spec.alpha, "fitted_slope": slope, "seed": seed}, indent=2),
    )
    _echo_config(cfg, outdir, {"fitted_slope": slope})
    print(f"gen-noise: alpha={spec.alpha} fitted slope={slope:+.4f} -> {outdir}")
    return 0


def _load_or_build_model(cfg: dict, dcfg_present: bool) -> nn.Model:
    diag = cfg.get("diagnose", {})
    if "checkpoint" in diag:
        return nn.load_model(diag["checkpoint"])
    if "model" in cfg:
        return build_model(cfg, cfg.get("seed", 0))
    raise ConfigError(["diagnose/probe-spectrum: give a checkpoint or a model spec"])


def _factor_sources(cfg: dict, model: nn.Model, sources_cfg, dataset, probe_batch, damping, seed):
    """Estimated factors per configured source: {name: {layer: (A, G)}}."""
    out = {}
    rng = Rng(seed).child(9)
    for idx, pcfg in enumerate(sources_cfg):
        probe = build_probe(pcfg, dataset)
        conf = kfac.KfacConfig(probe=probe, probe_batch=probe_batch, damping=damping)
        x, y = kfac.make_probe_batch(model, conf, rng.child(idx))
        name = pcfg["kind"] if pcfg["kind"] != "dataset" else f"dataset-{idx}"
        out[name] = kfac.estimate_factors(model, x, y, damping=damping)
    return out


def _spectrum_rows(named_factors):
    rows = []
    for name, factors in named_factors.items():
        for layer, (a_hat, g_hat) in sorted(factors.items()):
            spec = diagnostics.reconstructed_spectrum(
                sym_eig(a_hat).values, sym_eig(g_hat).values
            )
            for rank, val in enumerate(spec):
                rows.append([layer, rank, val, name])
    return rows


def _task_probe_spectrum(cfg: dict) -> int:
    outdir = resolve_output_dir(cfg)
    dataset = build_dataset(cfg["dataset"]) if "dataset" in cfg else None
    model = _load_or_build_model(cfg, dataset is not None)
    diag = cfg.get("diagnose", {})
    sources = diag.get("sources", [{"kind": "pink"}])
    named = _factor_sources(
        cfg, model, sources, dataset, diag.get("probe_batch", 64),
        diag.get("damping", 1e-3), cfg.get("seed", 0),
    )
    write_csv(
        os.path.join(outdir, "spectrum.csv"),
        ["layer", "rank", "value", "source"],
        _spectrum_rows(named),
    )
    _echo_config(cfg, outdir, {"sources": list(named)})
    print(f"probe-spectrum: {len(named)} source(s) -> {outdir}")
    return 0


def _task_diagnose(cfg: dict) -> int:
    outdir = resolve_output_dir(cfg)
    dataset = build_dataset(cfg["dataset"]) if "dataset" in cfg else None
    model = _load_or_build_model(cfg, dataset is not None)
    diag = cfg["diagnose"]
    probe_batch = diag.get("probe_batch", 64)
    damping = diag.get("damping", 1e-3)
    sources_cfg = diag["sources"]
    if not any(p["kind"] == "oracle" for p in sources_cfg):
        raise ConfigError(["diagnose: needs an oracle source to align against"])
    named = _factor_sources(
        cfg, model, sources_cfg, dataset, probe_batch, damping, cfg.get("seed", 0)
    )
    oracle = named.pop("oracle")
    rows = []
    for name, factors in named.items():
        rows += diagnostics.factor_alignment_rows(oracle, factors, name, step=0)
    write_csv(
        os.path.join(outdir, "alignment.csv"),
        ["step", "source", "layer", "factor", "cosine", "rel_frob", "rel_frob_unitnorm"],
        [[r[c] for c in ("step", "source", "layer", "factor", "cosine", "rel_frob", "rel_frob_unitnorm")] for r in rows],
    )
    named["oracle"] = oracle
    write_csv(
        os.path.join(outdir, "spectrum.csv"),
        ["layer", "rank", "value", "source"],
        _spectrum_rows(named),
    )
    _echo_config(cfg, outdir, {"sources": list(named)})
    print(f"diagnose: {len(rows)} alignment rows -> {outdir}")
    return 0


_TASK_FN = {
    "train": _task_train,
    "accountant": _task_accountant,
    "gen-noise": _task_gen_noise,
    "probe-spectrum": _task_probe_spectrum,
    "diagnose": _task_diagnose,
}

_TASK_NEEDS = {
    "train": ("dataset", "model", "train", "privacy"),
    "accountant": ("accountant",),
    "gen-noise": ("noise",),
    "probe-spectrum": (),
    "diagnose": ("diagnose",),
}


def run(task: str, config_path: str, overrides: list[str]) -> int:
    with open(config_path, "r", encoding="utf-8") as f:
        cfg = json.load(f)
    cfg = apply_overrides(cfg, overrides)
    validate_config(cfg)
    violations = []
    if "task" in cfg and cfg["task"] != task:
        violations.append(f"task: config says {cfg['task']!r} but {task!r} was invoked")
    for key in _TASK_NEEDS[task]:
        if key not in cfg:
            violations.append(f"{key}: required for task {task!r}")
    if violations:
        raise ConfigError(violations)
    return _TASK_FN[task](cfg)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dpkfac",
        description="DP training with probe-built KFAC preconditioners",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="task", required=True)
    for t in TASKS:
        p = sub.add_parser(t)
        p.add_argument("--config", required=True)
        p.add_argument("overrides", nargs="*", help="key.path=value overrides")
    args = parser.parse_args(argv)
    try:
        return run(args.task, args.config, args.overrides)
    except ConfigError as exc:
        record = {"error": "ConfigError", "violations": exc.violations}
        print(json.dumps(record), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single reporting point
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
