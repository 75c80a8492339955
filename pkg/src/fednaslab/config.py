"""Experiment configuration: strict YAML schema, profiles, and manifests.

A configuration document is a nested mapping with one section per pipeline
stage. Section and key names are validated strictly — an unknown key is a
hard error, not a warning — so typos cannot silently fall back to
defaults. A `profile` key pulls in a complete set of defaults (`desk` for
minutes-scale synthetic runs, `paper` for the full-size schedule) which the
rest of the document then overrides key by key.
"""

from __future__ import annotations

import dataclasses
import datetime
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .ga import GAConfig
from .space import SpaceConfig

OUTPUT_ROOT_ENV = "FEDNASLAB_RUNS"

_INF_TOKENS = {"inf", "infinity", ".inf"}


def _as_float(value, where: str) -> float:
    """YAML scalars arrive as int, float, or the string spellings of inf."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str) and value.strip().lower() in _INF_TOKENS:
        return math.inf
    raise ConfigError(f"{where}: expected a number, got {value!r}")


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    return int(value)


def _as_str(value, where: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _as_pair(value, where: str) -> tuple[float, float]:
    if (not isinstance(value, (list, tuple)) or len(value) != 2):
        raise ConfigError(f"{where}: expected [low, high], got {value!r}")
    lo, hi = (_as_float(v, where) for v in value)
    if not (0 < lo < hi):
        raise ConfigError(f"{where}: need 0 < low < high, got {value!r}")
    return (lo, hi)


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(
            f"{where}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")


# ---------------------------------------------------------------------------
# section records


@dataclass(frozen=True)
class DatasetSpec:
    """What data the run sees: a synthetic classification task or a binary
    image file on disk."""

    kind: str = "synth"
    num_classes: int = 2
    per_class: int = 300
    separation: float = 1.5
    image_side: int = 8
    path: str | None = None
    coarse: bool = False

    def __post_init__(self):
        if self.kind not in ("synth", "cifar"):
            raise ConfigError(f"dataset.kind must be synth or cifar, got {self.kind!r}")
        if self.kind == "cifar" and not self.path:
            raise ConfigError("dataset.path is required when kind is cifar")
        if self.num_classes < 2:
            raise ConfigError(f"dataset.num_classes must be >= 2, got {self.num_classes}")
        if self.per_class < 2:
            raise ConfigError(f"dataset.per_class must be >= 2, got {self.per_class}")
        if self.image_side < 4 or (self.image_side & (self.image_side - 1)):
            raise ConfigError(
                f"dataset.image_side must be a power of two >= 4, got {self.image_side}")
        if not (self.separation > 0 and math.isfinite(self.separation)):
            raise ConfigError(f"dataset.separation must be > 0, got {self.separation}")


@dataclass(frozen=True)
class PartitionSpec:
    """How samples are dealt across clients."""

    scheme: str = "dirichlet"
    alpha: float = 0.5
    classes_per_client: int = 2
    skew: float = 0.0

    def __post_init__(self):
        if self.scheme not in ("dirichlet", "class_subset"):
            raise ConfigError(
                f"partition.scheme must be dirichlet or class_subset, got {self.scheme!r}")
        if self.alpha <= 0:
            raise ConfigError(f"partition.alpha must be > 0, got {self.alpha}")
        if self.classes_per_client < 1:
            raise ConfigError("partition.classes_per_client must be >= 1")
        if not (0.0 <= self.skew < 1.0):
            raise ConfigError(f"partition.skew must be in [0, 1), got {self.skew}")


@dataclass(frozen=True)
class ClientSpec:
    """Population size, participation, and per-client privacy budgets."""

    count: int = 5
    participation: float = 1.0
    eps_budgets: tuple[float, ...] = (math.inf,)
    delta: float = 1e-5

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"clients.count must be >= 1, got {self.count}")
        if not (0.0 < self.participation <= 1.0):
            raise ConfigError(
                f"clients.participation must be in (0, 1], got {self.participation}")
        if len(self.eps_budgets) not in (1, self.count):
            raise ConfigError(
                f"clients.eps_budget must be a scalar or a list of length "
                f"{self.count}, got {len(self.eps_budgets)} entries")
        for eps in self.eps_budgets:
            if not (eps > 0):
                raise ConfigError(f"eps budgets must be > 0, got {eps}")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError(f"clients.delta must be in (0, 1), got {self.delta}")

    def budget_for(self, client_id: int) -> float:
        if len(self.eps_budgets) == 1:
            return self.eps_budgets[0]
        return self.eps_budgets[client_id]


@dataclass(frozen=True)
class BOSpec:
    """Hyperparameter-search schedule and box bounds."""

    k_init: int = 3
    n_iter: int = 5
    trial_epochs: int = 3
    eta_range: tuple[float, float] = (1e-4, 1e-1)
    q_range: tuple[float, float] = (0.02, 1.0)
    clip_range: tuple[float, float] = (0.1, 4.0)
    sigma_range: tuple[float, float] = (0.5, 4.0)

    def __post_init__(self):
        if self.k_init < 2:
            raise ConfigError(f"bo.k_init must be >= 2, got {self.k_init}")
        if self.n_iter < 0:
            raise ConfigError(f"bo.n_iter must be >= 0, got {self.n_iter}")
        if self.trial_epochs < 1:
            raise ConfigError(f"bo.trial_epochs must be >= 1, got {self.trial_epochs}")


@dataclass(frozen=True)
class TrainSpec:
    """Federated schedule plus the fallback local recipe used when no
    hyperparameter-search output is supplied.

    `sigma` may be the string "auto", meaning: calibrate the noise
    multiplier per client to the smallest value whose whole-run cost fits
    the client's budget.
    """

    rounds: int = 20
    local_epochs: int = 2
    eta: float = 0.02
    batch_size: int = 32
    clip: float = 1.0
    sigma: float | str = 0.0
    head_epochs: int = 5
    eta_theta: float = 0.01
    head_batch: int = 64
    target_acc: float | None = None

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 0:
            raise ConfigError(
                f"train.rounds must be >= 1 and train.local_epochs >= 0, got "
                f"{self.rounds}, {self.local_epochs}")
        if self.eta <= 0 or self.batch_size < 1 or self.clip <= 0:
            raise ConfigError("train.eta and train.clip must be > 0, "
                              "train.batch_size >= 1")
        if isinstance(self.sigma, str):
            if self.sigma != "auto":
                raise ConfigError(
                    f'train.sigma must be a number or "auto", got {self.sigma!r}')
        elif self.sigma < 0:
            raise ConfigError(f"train.sigma must be >= 0, got {self.sigma}")
        if self.head_epochs < 1 or self.eta_theta <= 0 or self.head_batch < 1:
            raise ConfigError("bad train head parameters")
        if self.target_acc is not None and not (0.0 < self.target_acc <= 1.0):
            raise ConfigError(f"train.target_acc must be in (0, 1], got {self.target_acc}")


@dataclass(frozen=True)
class AttackSpec:
    """Inversion-probe schedule."""

    seeds: int = 5
    decoder_epochs: int = 40
    decoder_lr: float = 1e-3
    aux_fraction: float = 0.5
    victim_count: int = 40

    def __post_init__(self):
        if self.seeds < 1:
            raise ConfigError(f"attack.seeds must be >= 1, got {self.seeds}")
        if self.decoder_epochs < 1:
            raise ConfigError("attack.decoder_epochs must be >= 1")
        if self.decoder_lr <= 0:
            raise ConfigError("attack.decoder_lr must be > 0")
        if not (0.0 < self.aux_fraction < 1.0):
            raise ConfigError(
                f"attack.aux_fraction must be in (0, 1), got {self.aux_fraction}")
        if self.victim_count < 1:
            raise ConfigError("attack.victim_count must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs, resolved and validated."""

    seed: int = 0
    profile: str = "desk"
    output_dir: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    clients: ClientSpec = field(default_factory=ClientSpec)
    space: SpaceConfig = field(default_factory=SpaceConfig)
    ga: GAConfig = field(default_factory=GAConfig)
    bo: BOSpec = field(default_factory=BOSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)

    def resolve_output_dir(self, override: str | None = None) -> str:
        """Flag override > document value > environment root > ./runs."""
        if override:
            return override
        if self.output_dir:
            return self.output_dir
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        return os.path.join(root, f"{self.profile}-seed{self.seed}")

    def canonical_json(self) -> str:
        """Stable serialization used for hashing and the manifest."""

        def unfold(value):
            if dataclasses.is_dataclass(value) and not isinstance(value, type):
                return {k: unfold(v) for k, v in
                        dataclasses.asdict(value).items()}
            if isinstance(value, dict):
                return {k: unfold(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [unfold(v) for v in value]
            if isinstance(value, float) and math.isinf(value):
                return "inf"
            return value

        return json.dumps(unfold(self), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# profiles

# Minutes-scale profile: tiny synthetic images, shallow space, short
# schedules. Values chosen so every stage runs in seconds on one core while
# still exercising each code path.
_DESK = {
    "dataset": {"kind": "synth", "num_classes": 2, "per_class": 300,
                "separation": 1.5, "image_side": 8},
    "partition": {"scheme": "dirichlet", "alpha": 0.5},
    "clients": {"count": 5, "participation": 1.0, "eps_budget": "inf",
                "delta": 1e-5},
    "space": {"input_shape": [3, 8, 8], "d_rep": 16, "num_classes": 2,
              "min_len": 3, "max_len": 4},
    "ga": {"pop_size": 6, "generations": 3, "p_cross": 0.9, "p_mut": 0.2,
           "eval_epochs": 2},
    "bo": {"k_init": 3, "n_iter": 4, "trial_epochs": 3},
    "train": {"rounds": 20, "local_epochs": 2, "eta": 0.02, "batch_size": 32,
              "clip": 1.0, "sigma": 0.0, "target_acc": 0.9},
    "attack": {"seeds": 5, "decoder_epochs": 30},
}

# Full-size schedule matching the reference experimental setup; expects a
# CIFAR-format binary file and hours of compute.
_PAPER = {
    "dataset": {"kind": "cifar", "num_classes": 10, "path": "data/cifar.bin"},
    "partition": {"scheme": "dirichlet", "alpha": 0.5},
    "clients": {"count": 10, "participation": 1.0, "eps_budget": 5.0,
                "delta": 1e-5},
    "space": {"input_shape": [3, 32, 32], "d_rep": 128, "num_classes": 10,
              "min_len": 3, "max_len": 12},
    "ga": {"pop_size": 10, "generations": 20, "p_cross": 0.9, "p_mut": 0.2,
           "eval_epochs": 5},
    "bo": {"k_init": 5, "n_iter": 30, "trial_epochs": 5},
    "train": {"rounds": 300, "local_epochs": 30, "eta": 0.01,
              "batch_size": 64, "clip": 1.0, "sigma": "auto"},
    "attack": {"seeds": 5, "decoder_epochs": 60},
}

PROFILES = {"desk": _DESK, "paper": _PAPER}


def _merge(base: dict, override: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = {**out[key], **value}
        else:
            out[key] = value
    return out


# ---------------------------------------------------------------------------
# document -> records

_TOP_KEYS = {"profile", "seed", "output_dir", "dataset", "partition",
             "clients", "space", "ga", "bo", "train", "attack"}


def _build_dataset(section: dict) -> DatasetSpec:
    allowed = {"kind", "num_classes", "per_class", "separation",
               "image_side", "path", "coarse"}
    _check_keys(section, allowed, "dataset")
    kwargs = {}
    if "kind" in section:
        kwargs["kind"] = _as_str(section["kind"], "dataset.kind")
    for key in ("num_classes", "per_class", "image_side"):
        if key in section:
            kwargs[key] = _as_int(section[key], f"dataset.{key}")
    if "separation" in section:
        kwargs["separation"] = _as_float(section["separation"], "dataset.separation")
    if "path" in section and section["path"] is not None:
        kwargs["path"] = _as_str(section["path"], "dataset.path")
    if "coarse" in section:
        if not isinstance(section["coarse"], bool):
            raise ConfigError("dataset.coarse must be a boolean")
        kwargs["coarse"] = section["coarse"]
    return DatasetSpec(**kwargs)


def _build_partition(section: dict) -> PartitionSpec:
    allowed = {"scheme", "alpha", "classes_per_client", "skew"}
    _check_keys(section, allowed, "partition")
    kwargs = {}
    if "scheme" in section:
        kwargs["scheme"] = _as_str(section["scheme"], "partition.scheme")
    if "alpha" in section:
        kwargs["alpha"] = _as_float(section["alpha"], "partition.alpha")
    if "classes_per_client" in section:
        kwargs["classes_per_client"] = _as_int(
            section["classes_per_client"], "partition.classes_per_client")
    if "skew" in section:
        kwargs["skew"] = _as_float(section["skew"], "partition.skew")
    return PartitionSpec(**kwargs)


def _build_clients(section: dict) -> ClientSpec:
    allowed = {"count", "participation", "eps_budget", "delta"}
    _check_keys(section, allowed, "clients")
    kwargs = {}
    if "count" in section:
        kwargs["count"] = _as_int(section["count"], "clients.count")
    if "participation" in section:
        kwargs["participation"] = _as_float(
            section["participation"], "clients.participation")
    if "eps_budget" in section:
        raw = section["eps_budget"]
        if isinstance(raw, (list, tuple)):
            kwargs["eps_budgets"] = tuple(
                _as_float(v, "clients.eps_budget") for v in raw)
        else:
            kwargs["eps_budgets"] = (_as_float(raw, "clients.eps_budget"),)
    if "delta" in section:
        kwargs["delta"] = _as_float(section["delta"], "clients.delta")
    return ClientSpec(**kwargs)


def _build_space(section: dict) -> SpaceConfig:
    allowed = {"input_shape", "d_rep", "num_classes", "min_len", "max_len",
               "channel_choices", "kernel_choices", "pool_types"}
    _check_keys(section, allowed, "space")
    kwargs = {}
    if "input_shape" in section:
        shape = section["input_shape"]
        if not isinstance(shape, (list, tuple)) or len(shape) != 3:
            raise ConfigError(f"space.input_shape must be [c, h, w], got {shape!r}")
        kwargs["input_shape"] = tuple(_as_int(v, "space.input_shape") for v in shape)
    for key in ("d_rep", "num_classes", "min_len", "max_len"):
        if key in section:
            kwargs[key] = _as_int(section[key], f"space.{key}")
    for key in ("channel_choices", "kernel_choices"):
        if key in section:
            values = section[key]
            if not isinstance(values, (list, tuple)):
                raise ConfigError(f"space.{key} must be a list")
            kwargs[key] = tuple(_as_int(v, f"space.{key}") for v in values)
    if "pool_types" in section:
        values = section["pool_types"]
        if not isinstance(values, (list, tuple)):
            raise ConfigError("space.pool_types must be a list")
        kwargs["pool_types"] = tuple(_as_str(v, "space.pool_types") for v in values)
    try:
        return SpaceConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"space: {exc}") from exc


def _build_ga(section: dict) -> GAConfig:
    allowed = {"pop_size", "generations", "p_cross", "p_mut", "eval_epochs"}
    _check_keys(section, allowed, "ga")
    kwargs = {}
    for key in ("pop_size", "generations", "eval_epochs"):
        if key in section:
            kwargs[key] = _as_int(section[key], f"ga.{key}")
    for key in ("p_cross", "p_mut"):
        if key in section:
            kwargs[key] = _as_float(section[key], f"ga.{key}")
    return GAConfig(**kwargs)


def _build_bo(section: dict) -> BOSpec:
    allowed = {"k_init", "n_iter", "trial_epochs", "eta_range", "q_range",
               "clip_range", "sigma_range"}
    _check_keys(section, allowed, "bo")
    kwargs = {}
    for key in ("k_init", "n_iter", "trial_epochs"):
        if key in section:
            kwargs[key] = _as_int(section[key], f"bo.{key}")
    for key in ("eta_range", "q_range", "clip_range", "sigma_range"):
        if key in section:
            kwargs[key] = _as_pair(section[key], f"bo.{key}")
    return BOSpec(**kwargs)


def _build_train(section: dict) -> TrainSpec:
    allowed = {"rounds", "local_epochs", "eta", "batch_size", "clip", "sigma",
               "head_epochs", "eta_theta", "head_batch", "target_acc"}
    _check_keys(section, allowed, "train")
    kwargs = {}
    for key in ("rounds", "local_epochs", "batch_size", "head_epochs",
                "head_batch"):
        if key in section:
            kwargs[key] = _as_int(section[key], f"train.{key}")
    for key in ("eta", "clip", "eta_theta"):
        if key in section:
            kwargs[key] = _as_float(section[key], f"train.{key}")
    if "sigma" in section:
        raw = section["sigma"]
        kwargs["sigma"] = raw if raw == "auto" else _as_float(raw, "train.sigma")
    if "target_acc" in section and section["target_acc"] is not None:
        kwargs["target_acc"] = _as_float(section["target_acc"], "train.target_acc")
    return TrainSpec(**kwargs)


def _build_attack(section: dict) -> AttackSpec:
    allowed = {"seeds", "decoder_epochs", "decoder_lr", "aux_fraction",
               "victim_count"}
    _check_keys(section, allowed, "attack")
    kwargs = {}
    for key in ("seeds", "decoder_epochs", "victim_count"):
        if key in section:
            kwargs[key] = _as_int(section[key], f"attack.{key}")
    for key in ("decoder_lr", "aux_fraction"):
        if key in section:
            kwargs[key] = _as_float(section[key], f"attack.{key}")
    return AttackSpec(**kwargs)


def build_config(document: dict) -> ExperimentConfig:
    """Validate a parsed document and resolve it over its profile."""
    if not isinstance(document, dict):
        raise ConfigError(f"config root must be a mapping, got {type(document).__name__}")
    _check_keys(document, _TOP_KEYS, "config")
    profile = document.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(
            f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
    merged = _merge(PROFILES[profile], {k: v for k, v in document.items()
                                        if k not in ("profile", "seed", "output_dir")})
    for key in merged:
        if not isinstance(merged[key], dict):
            raise ConfigError(f"{key}: expected a mapping, got {merged[key]!r}")
    seed = _as_int(document.get("seed", 0), "seed")
    output_dir = None
    if document.get("output_dir") is not None:
        output_dir = _as_str(document["output_dir"], "output_dir")
    return ExperimentConfig(
        seed=seed,
        profile=profile,
        output_dir=output_dir,
        dataset=_build_dataset(merged.get("dataset", {})),
        partition=_build_partition(merged.get("partition", {})),
        clients=_build_clients(merged.get("clients", {})),
        space=_build_space(merged.get("space", {})),
        ga=_build_ga(merged.get("ga", {})),
        bo=_build_bo(merged.get("bo", {})),
        train=_build_train(merged.get("train", {})),
        attack=_build_attack(merged.get("attack", {})),
    )


def load_config(path) -> ExperimentConfig:
    """Parse a YAML document from disk and validate it."""
    try:
        with open(path) as fh:
            document = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if document is None:
        document = {}
    return build_config(document)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    """Provenance record written at the start of a run and finalized at the
    end, so a half-written output directory is recognizable."""

    command: str
    config_hash: str
    seed: int
    package_version: str
    started: str
    finished: str | None = None
    artifacts: dict = field(default_factory=dict)

    @classmethod
    def start(cls, command: str, config: ExperimentConfig) -> "RunManifest":
        from . import __version__
        now = datetime.datetime.now(datetime.timezone.utc).isoformat()
        return cls(command=command, config_hash=config.config_hash(),
                   seed=config.seed, package_version=__version__, started=now)

    def finalize(self, artifacts: dict) -> None:
        self.artifacts = dict(artifacts)
        self.finished = datetime.datetime.now(datetime.timezone.utc).isoformat()

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
