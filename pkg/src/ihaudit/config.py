"""Experiment configuration: a versioned JSON document plus its hash.

Keys (all optional except where noted)::

    version      format version, currently 1
    dataset      {"source": "synthetic" | "csv" | "idx", ...}
                   synthetic: n, feature_dim, num_classes, class_separation,
                              base_rate, label_noise, seed
                   csv:       path, label_column
                   idx:       images, labels, odd_even
    model        {"architecture": "mlp" | "linear", "hidden": [..],
                  "activation": "relu", "loss_kind": "cross_entropy"}
    sgd          SgdConfig fields except seed (per-model seeds are derived)
    num_models   number of models in the membership game
    gamma        membership probability per record
    seed         master seed for masks, SGD seeds and non-member sampling
    attacks      list of {"name": ..., "id": ..., attack settings}
    audit        {"targets": [..] | null, "fprs": [..], "agreement_fpr": q}
    output_dir   where artifacts go (IHA_OUTPUT_DIR overrides)
    threads      worker pool size (IHA_THREADS overrides)

Relative dataset paths resolve against the config file's directory.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import attacks as A
from .data import Dataset, load_csv_tabular, load_idx, synth_tabular
from .errors import FormatError, MissingArtifact
from .linalg import ConditioningPolicy
from .model import ModelSpec
from .training import SgdConfig

CONFIG_VERSION = 1
ENV_OUTPUT_DIR = "IHA_OUTPUT_DIR"
ENV_THREADS = "IHA_THREADS"

ATTACK_NAMES = ("loss", "sif", "iha", "lira", "lattack", "lira_l")

ATTACK_DEFAULTS = {
    "loss": {},
    "sif": {"conditioning": {"mode": "damped", "epsilon": 0.2}, "hessian": "exact"},
    "iha": {
        "terms": "all",
        "conditioning": {"mode": "damped", "epsilon": 0.2},
        "l0_fraction": 1.0,
        "output_mode": A.RAW,
        "hessian": "exact",
    },
    "lira": {"mode": A.ONLINE, "statistic": "loss"},
    "lattack": {"references": 32, "max_records": None},
    "lira_l": {"references": 32, "max_records": None},
}

SYNTHETIC_DEFAULT = {
    "version": CONFIG_VERSION,
    "dataset": {
        "source": "synthetic",
        "n": 2000,
        "feature_dim": 50,
        "num_classes": 5,
        "class_separation": 0.5,
        "base_rate": 0.2,
        "label_noise": 0.1,
        "seed": 0,
    },
    "model": {"architecture": "mlp", "hidden": [16], "activation": "relu", "loss_kind": "cross_entropy"},
    "sgd": {"learning_rate": 0.05, "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 32, "epochs": 100},
    "num_models": 32,
    "gamma": 0.5,
    "seed": 0,
    "attacks": [
        {"name": "loss"},
        {"name": "iha"},
        {"name": "iha", "id": "iha[loss+i1+i2]", "terms": "loss,i1,i2"},
        {"name": "sif"},
        {"name": "lira"},
    ],
    "audit": {"targets": [0, 1, 2, 3, 4, 5, 6, 7], "fprs": [0.01, 0.001], "agreement_fpr": 0.05},
    "output_dir": "runs/synthetic",
    "threads": 1,
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclasses.dataclass(frozen=True)
class AttackSpec:
    id: str
    name: str
    settings: dict

    def conditioning(self) -> ConditioningPolicy:
        c = self.settings["conditioning"]
        return ConditioningPolicy(c.get("mode", "damped"), float(c.get("epsilon", 0.2)))

    @property
    def needs_exact_hessian(self) -> bool:
        return self.name in ("iha", "sif") and self.settings.get("hessian") == "exact"

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, **self.settings}


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    base_dir: Path
    output_dir: Path
    threads: int

    @property
    def hash(self) -> str:
        """sha256 over everything except output location and thread count."""
        body = {k: v for k, v in self.raw.items() if k not in ("output_dir", "threads")}
        return hashlib.sha256(canonical_json(body).encode()).hexdigest()

    @property
    def num_models(self) -> int:
        return int(self.raw["num_models"])

    @property
    def gamma(self) -> float:
        return float(self.raw["gamma"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def model_spec(self) -> ModelSpec:
        m = self.raw["model"]
        d = self.dataset.feature_dim
        if m.get("architecture", "mlp") == "linear":
            return ModelSpec.linear(d, int(m.get("output_dim", 1)))
        out = int(m.get("output_dim") or self.dataset.num_classes)
        return ModelSpec.mlp(
            d, tuple(m.get("hidden", (16,))), out, loss_kind=m.get("loss_kind", "cross_entropy"),
            activation=m.get("activation", "relu"),
        )

    def sgd(self, model_index: int) -> SgdConfig:
        return SgdConfig(**self.raw["sgd"], seed=model_seed(self.seed, model_index, "sgd"))

    def mask_seed(self, model_index: int) -> int:
        return model_seed(self.seed, model_index, "mask")

    @property
    def attacks(self) -> list[AttackSpec]:
        return [_attack_spec(a) for a in self.raw["attacks"]]

    def attack(self, attack_id: str) -> AttackSpec:
        for a in self.attacks:
            if a.id == attack_id:
                return a
        raise FormatError(f"no attack with id {attack_id!r}; configured: {[a.id for a in self.attacks]}")

    @property
    def targets(self) -> list[int]:
        t = self.raw["audit"].get("targets")
        return list(range(self.num_models)) if t is None else [int(i) for i in t]

    @property
    def fprs(self) -> tuple[float, ...]:
        return tuple(float(q) for q in self.raw["audit"].get("fprs", (0.01, 0.001)))

    @property
    def agreement_fpr(self) -> float:
        return float(self.raw["audit"].get("agreement_fpr", 0.05))

    @property
    def dataset(self) -> Dataset:
        return _dataset_cache(self)


_DATASETS: dict = {}


def _dataset_cache(cfg: ExperimentConfig) -> Dataset:
    key = (canonical_json(cfg.raw["dataset"]), str(cfg.base_dir))
    if key not in _DATASETS:
        _DATASETS[key] = load_dataset(cfg.raw["dataset"], cfg.base_dir)
    return _DATASETS[key]


def load_dataset(spec: dict, base_dir: Path = Path(".")) -> Dataset:
    source = spec.get("source", "synthetic")
    if source == "synthetic":
        spec = {**SYNTHETIC_DEFAULT["dataset"], **spec}
        return synth_tabular(
            int(spec.get("seed", 0)),
            int(spec["n"]),
            int(spec["feature_dim"]),
            int(spec["num_classes"]),
            class_separation=float(spec.get("class_separation", 0.5)),
            base_rate=float(spec.get("base_rate", 0.2)),
            label_noise=float(spec.get("label_noise", 0.0)),
        )
    if source == "csv":
        return load_csv_tabular(_resolve(spec["path"], base_dir), spec.get("label_column", "label"))
    if source == "idx":
        return load_idx(
            _resolve(spec["images"], base_dir), _resolve(spec["labels"], base_dir), bool(spec.get("odd_even", False))
        )
    raise FormatError(f"unknown dataset source {source!r}")


def _resolve(path, base_dir: Path) -> Path:
    p = Path(path)
    if not p.is_absolute():
        p = base_dir / p
    if not p.exists():
        raise MissingArtifact(p)
    return p


def model_seed(master: int, index: int, purpose: str) -> int:
    tag = {"mask": 0, "sgd": 1, "nonmember": 2, "l0": 3, "loo": 4}[purpose]
    return int(np.random.SeedSequence([master, index, tag]).generate_state(1, dtype=np.uint32)[0])


def _default_attack_id(a: dict) -> str:
    if a["name"] == "iha":
        parts = []
        terms = A.terms_key(A.parse_terms(a.get("terms", "all")))
        if terms != A.terms_key(A.ALL_TERMS):
            parts.append(terms)
        if float(a.get("l0_fraction", 1.0)) != 1.0:
            parts.append(f"l0={float(a['l0_fraction']):g}")
        return "iha" + (f"[{','.join(parts)}]" if parts else "")
    return a["name"]


def _attack_spec(a: dict) -> AttackSpec:
    name = a.get("name")
    if name not in ATTACK_NAMES:
        raise FormatError(f"unknown attack {name!r}; choose from {ATTACK_NAMES}")
    settings = copy.deepcopy(ATTACK_DEFAULTS[name])
    extra = set(a) - {"name", "id"} - set(settings)
    if extra:
        raise FormatError(f"attack {name}: unknown settings {sorted(extra)}")
    settings.update({k: v for k, v in a.items() if k not in ("name", "id")})
    if name == "iha":
        settings["terms"] = A.terms_key(A.parse_terms(settings["terms"]))
    return AttackSpec(a.get("id") or _default_attack_id(a), name, settings)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "dataset":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def from_dict(raw: dict, base_dir=".", env=None) -> ExperimentConfig:
    """Validate ``raw`` (missing keys take the synthetic defaults) and apply env overrides."""
    env = os.environ if env is None else env
    raw = _merge(SYNTHETIC_DEFAULT, raw)
    if raw.get("version") != CONFIG_VERSION:
        raise FormatError(f"config version {raw.get('version')!r} is not supported (expected {CONFIG_VERSION})")
    unknown = set(raw) - set(SYNTHETIC_DEFAULT)
    if unknown:
        raise FormatError(f"unknown config keys {sorted(unknown)}")
    try:
        SgdConfig(**raw["sgd"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"sgd: {exc}") from None
    if not 0.0 < float(raw["gamma"]) < 1.0:
        raise FormatError("gamma must lie in (0, 1)")
    attacks = [_attack_spec(a) for a in raw["attacks"]]
    ids = [a.id for a in attacks]
    if len(set(ids)) != len(ids):
        raise FormatError(f"duplicate attack ids {ids}")
    needs_refs = any(a.name == "lira" for a in attacks)
    if int(raw["num_models"]) < (2 if needs_refs else 1):
        raise FormatError("num_models must be at least 2 when reference-model attacks are configured")
    base_dir = Path(base_dir)
    out = Path(env.get(ENV_OUTPUT_DIR) or raw["output_dir"])
    if not out.is_absolute():
        out = base_dir / out
    threads = int(env.get(ENV_THREADS) or raw.get("threads") or 1)
    if threads < 1:
        raise FormatError("thread count must be positive")
    cfg = ExperimentConfig(raw, base_dir, out, threads)
    for t in cfg.targets:
        if not 0 <= t < cfg.num_models:
            raise FormatError(f"audit target {t} outside 0..{cfg.num_models - 1}")
    return cfg


def load(path=None, env=None) -> ExperimentConfig:
    """Read a JSON config; ``None`` gives the bundled synthetic experiment."""
    if path is None:
        return from_dict({}, Path.cwd(), env)
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: top level must be an object")
    return from_dict(raw, path.parent, env)
