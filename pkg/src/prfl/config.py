"""Experiment configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

from .dpd import DpdConfig
from .errors import ConfigurationError

STRATEGIES = ("prfl", "fedavg", "local")


DEFAULT_HIDDEN = {"mlp": 128, "smallcnn": 64}
DEFAULT_DIMS = {"mlp": (16,), "smallcnn": (1, 16, 16)}


@dataclass
class ModelConfig:
    kind: str = "mlp"
    hidden_width: Optional[int] = None  # None: 128 for mlp, 64 for smallcnn
    channels: tuple = (8, 16)

    def __post_init__(self):
        if self.kind not in DEFAULT_HIDDEN:
            raise ConfigurationError(f"unknown model kind {self.kind!r}", key="kind")
        if self.hidden_width is None:
            self.hidden_width = DEFAULT_HIDDEN[self.kind]
        self.channels = tuple(self.channels)


@dataclass
class PartitionConfig:
    kind: str = "dirichlet"
    lam: float = 0.1
    classes_per_client: int = 2

    def __post_init__(self):
        if self.kind not in ("dirichlet", "pathological"):
            raise ConfigurationError(f"unknown partition kind {self.kind!r}", key="kind")
        if self.lam <= 0:
            raise ConfigurationError("lambda must be > 0", key="lambda")
        if self.classes_per_client < 1:
            raise ConfigurationError("classes_per_client must be >= 1", key="classes_per_client")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    path: Optional[str] = None
    num_classes: int = 8
    dims: Optional[tuple] = None  # None: chosen from the model kind
    n_per_class: int = 200
    spread: float = 1.0
    separation: float = 1.5

    def __post_init__(self):
        if self.kind not in ("synthetic", "file"):
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}", key="kind")
        if self.kind == "file" and not self.path:
            raise ConfigurationError("file datasets need a path", key="path")
        if self.kind == "synthetic":
            if self.num_classes < 2:
                raise ConfigurationError("num_classes must be >= 2", key="num_classes")
            if self.n_per_class < 1:
                raise ConfigurationError("n_per_class must be >= 1", key="n_per_class")
            if self.spread < 0:
                raise ConfigurationError("spread must be >= 0", key="spread")


@dataclass
class ExperimentConfig:
    seed: int = 0
    rounds: int = 100
    local_steps: int = 5
    lr: float = 5e-3
    batch_size: int = 32
    clients: int = 20
    participation_ratio: float = 0.1
    strategy: str = "prfl"
    dp_tau: float = 0.0
    downlink_compress: bool = True
    aux_matrix: bool = True
    latent_loss: bool = True
    output_dir: Optional[str] = None
    dpd: DpdConfig = field(default_factory=DpdConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def __post_init__(self):
        checks = [
            ("rounds", self.rounds >= 0, "must be >= 0"),
            ("local_steps", self.local_steps >= 1, "must be >= 1"),
            ("lr", self.lr > 0, "must be > 0"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("clients", self.clients >= 1, "must be >= 1"),
            ("participation_ratio", 0 < self.participation_ratio <= 1, "must lie in (0, 1]"),
            ("strategy", self.strategy in STRATEGIES, f"must be one of {STRATEGIES}"),
            ("dp_tau", self.dp_tau >= 0, "must be >= 0"),
        ]
        for key, ok, why in checks:
            if not ok:
                raise ConfigurationError(f"{key} {why}, got {getattr(self, key)!r}", key=key)
        if self.dataset.dims is None:
            self.dataset.dims = DEFAULT_DIMS[self.model.kind]
        self.dataset.dims = tuple(self.dataset.dims)

    def to_dict(self) -> dict:
        return asdict(self)
