"""Experiment configuration: the dataclass, the flat ``key = value`` file
format, named profiles, and grid specifications.

The exact key set is the file schema; unknown keys and ill-typed values
are rejected with errors naming the key.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .defense import DefenseConfig
from .errors import ConfigError
from .data import TriggerConfig
from .nn import ModelConfig

DATA_DIR_ENV = "FEDSIEVE_DATA_DIR"


@dataclass
class ExperimentConfig:
    # client composition
    n_iid: int = 90
    n_noniid: int = 0
    n_malicious: int = 10
    non_iid_rate: float = 0.2
    malicious_data_rate: float = 0.2
    samples_per_client: int = 200
    # training
    total_rounds: int = 30
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.001
    optimizer: str = "adam"
    reset_optimizer_each_round: bool = False
    participation_fraction: float = 1.0
    # defense
    abc_cadence: int | None = 3  # None = screening off
    cosine_mode: str = "delta"   # "delta" or "raw"
    threshold_mode: str = "delta"
    detection_metric_scope: str = "final"  # "final" or "mean" over screen runs
    # data source
    dataset_source: str = "synthetic"  # "synthetic" or "idx"
    data_dir: str | None = None
    train_images: str = "train-images-idx3-ubyte"
    train_labels: str = "train-labels-idx1-ubyte"
    test_images: str = "t10k-images-idx3-ubyte"
    test_labels: str = "t10k-labels-idx1-ubyte"
    noniid_source_dir: str | None = None
    max_label: int = 5
    clean_test_size: int = 600
    backdoor_test_size: int = 500
    # trigger
    trigger_bar_length: int = 5
    trigger_thickness: int = 1
    trigger_intensity: float = 0.5
    trigger_source_label: int = 1
    trigger_target_label: int = 3
    # model geometry
    image_size: int = 28
    conv1_channels: int = 8
    conv2_channels: int = 16
    kernel_size: int = 3
    pool_size: int = 2
    hidden_units: int = 64
    n_classes: int = 6
    fc_slice: str = "fc2"  # "fc2" or "fc1+fc2"
    # run control
    seed: int | None = None
    allow_malicious_majority: bool = False

    @property
    def n_clients(self) -> int:
        return self.n_iid + self.n_noniid + self.n_malicious

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("key 'seed': a master seed is required")
        if min(self.n_iid, self.n_noniid, self.n_malicious) < 0:
            raise ConfigError("client counts must be non-negative")
        if self.n_clients < 2:
            raise ConfigError(
                f"n_iid + n_noniid + n_malicious must be >= 2, got {self.n_clients}")
        if not self.allow_malicious_majority and self.n_malicious * 2 >= self.n_clients:
            raise ConfigError(
                f"key 'n_malicious': {self.n_malicious} of {self.n_clients} clients is a "
                "malicious majority; set allow_malicious_majority = true to override")
        for key in ("non_iid_rate", "malicious_data_rate", "participation_fraction",
                    "trigger_intensity"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"key '{key}': must lie in [0, 1], got {v}")
        if self.total_rounds < 0:
            raise ConfigError(f"key 'total_rounds': must be >= 0, got {self.total_rounds}")
        if self.local_epochs < 0:
            raise ConfigError(f"key 'local_epochs': must be >= 0, got {self.local_epochs}")
        for key in ("batch_size", "samples_per_client", "clean_test_size",
                    "backdoor_test_size", "trigger_bar_length", "trigger_thickness"):
            if getattr(self, key) < 1:
                raise ConfigError(f"key '{key}': must be >= 1, got {getattr(self, key)}")
        if self.learning_rate <= 0:
            raise ConfigError(f"key 'learning_rate': must be > 0, got {self.learning_rate}")
        if self.abc_cadence is not None and self.abc_cadence < 1:
            raise ConfigError(f"key 'abc_cadence': must be >= 1 or 'off', got {self.abc_cadence}")
        _require_choice(self, "optimizer", ("adam", "sgd"))
        _require_choice(self, "cosine_mode", ("delta", "raw"))
        _require_choice(self, "threshold_mode", ("delta", "raw"))
        _require_choice(self, "detection_metric_scope", ("final", "mean"))
        _require_choice(self, "dataset_source", ("synthetic", "idx"))
        _require_choice(self, "fc_slice", ("fc2", "fc1+fc2"))
        self.model_config()  # validates geometry

    # derived sub-configs -------------------------------------------------

    def model_config(self) -> ModelConfig:
        layers = ("fc2",) if self.fc_slice == "fc2" else ("fc1", "fc2")
        return ModelConfig(
            image_size=self.image_size,
            conv1_channels=self.conv1_channels,
            conv2_channels=self.conv2_channels,
            kernel_size=self.kernel_size,
            pool_size=self.pool_size,
            hidden_units=self.hidden_units,
            n_classes=self.n_classes,
            fc_slice_layers=layers,
        )

    def defense_config(self) -> DefenseConfig:
        return DefenseConfig(
            cosine_on_deltas=self.cosine_mode == "delta",
            threshold_on_deltas=self.threshold_mode == "delta",
        )

    def trigger_config(self) -> TriggerConfig:
        return TriggerConfig(
            bar_length=self.trigger_bar_length,
            thickness=self.trigger_thickness,
            intensity=self.trigger_intensity,
            source_label=self.trigger_source_label,
            target_label=self.trigger_target_label,
        )

    def resolved_data_dir(self) -> Path:
        """Dataset directory; the environment variable wins over the file."""
        env = os.environ.get(DATA_DIR_ENV)
        return Path(env if env else (self.data_dir or "."))

    # serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = "off" if f.name == "abc_cadence" else "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _require_choice(config, key: str, choices: tuple[str, ...]) -> None:
    if getattr(config, key) not in choices:
        raise ConfigError(f"key '{key}': must be one of {choices}, got '{getattr(config, key)}'")


# ---------------------------------------------------------------------------
# parsing


def _parse_int(key, text):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"key '{key}': expected an integer, got '{text}'") from None


def _parse_float(key, text):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"key '{key}': expected a number, got '{text}'") from None


def _parse_bool(key, text):
    if text.lower() in ("true", "yes", "1"):
        return True
    if text.lower() in ("false", "no", "0"):
        return False
    raise ConfigError(f"key '{key}': expected true/false, got '{text}'")


def _parse_cadence(key, text):
    if text.lower() in ("off", "none"):
        return None
    value = _parse_int(key, text)
    return value


def _parse_opt_str(key, text):
    return None if text.lower() == "none" else text


def _parse_opt_int(key, text):
    return None if text.lower() == "none" else _parse_int(key, text)


def _parsers() -> dict[str, callable]:
    parsers = {}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name == "abc_cadence":
            parsers[f.name] = _parse_cadence
        elif f.name == "seed":
            parsers[f.name] = _parse_opt_int
        elif f.type == "int":
            parsers[f.name] = _parse_int
        elif f.type == "float":
            parsers[f.name] = _parse_float
        elif f.type == "bool":
            parsers[f.name] = _parse_bool
        elif f.type == "str | None":
            parsers[f.name] = _parse_opt_str
        else:
            parsers[f.name] = lambda key, text: text
    return parsers


_PARSERS = _parsers()


def read_key_values(text: str, path: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
        out[key] = value
    return out


def parse_config_text(text: str, path: str = "<config>",
                      base: ExperimentConfig | None = None,
                      extra_keys: set[str] | None = None) -> ExperimentConfig:
    config = dataclasses.replace(base) if base else ExperimentConfig()
    for key, value in read_key_values(text, path).items():
        if extra_keys and key in extra_keys:
            continue
        if key not in _PARSERS:
            raise ConfigError(f"{path}: unknown key '{key}'")
        setattr(config, key, _PARSERS[key](key, value))
    config.validate()
    return config


def parse_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse and validate an experiment config file."""
    text = Path(path).read_text()
    return parse_config_text(text, str(path), base=base)


# ---------------------------------------------------------------------------
# profiles


PROFILES: dict[str, dict] = {
    # Desk scale: small enough for a laptop CPU in minutes.  Two local
    # epochs and a 25-sample batch give the weight deltas enough signal for
    # the screen at this scale.
    "desk": {
        "n_iid": 16, "n_noniid": 0, "n_malicious": 4,
        "samples_per_client": 200, "total_rounds": 9,
        "local_epochs": 2, "batch_size": 25,
    },
    # The full-scale experiment shape: 100 clients, 30 rounds.
    "paper": {
        "n_iid": 90, "n_noniid": 0, "n_malicious": 10,
        "samples_per_client": 200, "total_rounds": 30,
        "local_epochs": 1, "batch_size": 32,
    },
}


def profile_config(name: str) -> ExperimentConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile '{name}'; choose from {sorted(PROFILES)}")
    return dataclasses.replace(ExperimentConfig(), **PROFILES[name])


# ---------------------------------------------------------------------------
# grids


GRID_KEYS = {"grid_compositions", "grid_noniid_rates"}


@dataclass
class GridConfig:
    base: ExperimentConfig
    compositions: list[tuple[int, int, int]]
    noniid_rates: list[float]

    def cells(self) -> list[ExperimentConfig]:
        out = []
        for n_iid, n_noniid, n_malicious in self.compositions:
            for rate in self.noniid_rates:
                out.append(dataclasses.replace(
                    self.base, n_iid=n_iid, n_noniid=n_noniid,
                    n_malicious=n_malicious, non_iid_rate=rate))
        return out


def _parse_composition(text: str) -> tuple[int, int, int]:
    parts = text.strip().split("/")
    if len(parts) != 3:
        raise ConfigError(
            f"key 'grid_compositions': expected 'iid/noniid/malicious', got '{text.strip()}'")
    return tuple(_parse_int("grid_compositions", p) for p in parts)  # type: ignore[return-value]


def parse_grid_config(path, base: ExperimentConfig | None = None) -> GridConfig:
    """Grid file: regular experiment keys plus ``grid_compositions``
    (comma-separated ``iid/noniid/malicious`` triples) and
    ``grid_noniid_rates`` (comma-separated rates)."""
    text = Path(path).read_text()
    keys = read_key_values(text, str(path))
    if "grid_compositions" not in keys or "grid_noniid_rates" not in keys:
        raise ConfigError(f"{path}: grid config needs grid_compositions and grid_noniid_rates")
    compositions = [_parse_composition(c) for c in keys["grid_compositions"].split(",")]
    rates = [_parse_float("grid_noniid_rates", r) for r in keys["grid_noniid_rates"].split(",")]
    for rate in rates:
        if not 0.0 <= rate <= 1.0:
            raise ConfigError(f"key 'grid_noniid_rates': rate {rate} outside [0, 1]")
    base_config = parse_config_text(text, str(path), base=base, extra_keys=GRID_KEYS)
    # Individual cells are validated when they run, so one bad cell does not
    # take down the whole grid.
    return GridConfig(base=base_config, compositions=compositions, noniid_rates=rates)
