"""
pydantic models for configuration files and every persisted document.

Runtime numerical objects (Gallery, GeneratorParams, CmaesState, PrintDictionary)
are dataclasses in their own modules; the models here are their on-disk shape.
"""
import json
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Type, TypeVar, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.errors import ConfigurationError

FORMAT_VERSION = 1

STRATEGIES = ("random", "single", "diversity", "novelty", "independent")
# Table 1 列顺序：R / D / I / N，外加 independent 基线 M
STRATEGY_LABELS = {
    "random": "R",
    "single": "D",
    "diversity": "I",
    "novelty": "N",
    "independent": "M",
}
DEFAULT_STRATEGIES = ["random", "single", "diversity", "novelty"]

ModelT = TypeVar("ModelT", bound=BaseModel)


class GalleryConfig(BaseModel):
    """Synthetic enrolled population. ``user_count`` is the total before the train/test split."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    feature_dim: int = Field(32, description="m, template dimension")
    cluster_count: int = Field(5, description="C, number of user clusters")
    user_count: int = Field(400, description="total users (train + test when split)")
    impressions_per_user: int = Field(4, description="k, enrolled partial impressions per user")
    cluster_spread: float = Field(0.25, description="sigma_c, user-center noise around the cluster center")
    impression_noise: float = Field(0.1, description="sigma_imp, impression noise around the user center")

    def check(self) -> None:
        if self.feature_dim < 2:
            raise ConfigurationError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.cluster_count < 1:
            raise ConfigurationError(f"cluster_count must be >= 1, got {self.cluster_count}")
        if self.user_count < 1:
            raise ConfigurationError(f"user_count must be >= 1, got {self.user_count}")
        if self.impressions_per_user < 1:
            raise ConfigurationError(f"impressions_per_user must be >= 1, got {self.impressions_per_user}")
        if self.cluster_spread < 0 or self.impression_noise < 0:
            raise ConfigurationError(
                f"spreads must be non-negative, got cluster_spread={self.cluster_spread}, "
                f"impression_noise={self.impression_noise}"
            )


class GeneratorConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    latent_dim: int = Field(16, description="n, genome dimension")
    center_weight: float = Field(0.7, description="weight of the cluster center in a biased column")
    noise_weight: float = Field(0.3, description="weight of the random direction in a biased column")


class CmaesConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    sigma0: float = Field(0.5, description="initial step size")
    mean0: float = Field(0.0, description="every coordinate of the initial mean")
    population_size: Optional[int] = Field(None, description="lambda; None means 4 + floor(3 ln n)")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    gallery: GalleryConfig = Field(default_factory=GalleryConfig)
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    cmaes: CmaesConfig = Field(default_factory=CmaesConfig)

    # FMR 以小数表示：0.01 即表 1 中的 "FMR 1.0"（百分比）
    fmr_levels: List[float] = Field(default_factory=lambda: [0.01, 0.001, 0.0001])
    strategies: List[str] = Field(default_factory=lambda: list(DEFAULT_STRATEGIES))
    trials: int = 10
    max_dict_size: int = 10
    per_print_generations: int = 1000
    single_print_generations: int = 10000
    master_seed: int = 0

    min_fitness: int = Field(1, description="novelty minimal criterion: matched users below this score 0")
    calibration_max_pairs: int = 1_000_000
    min_impostor_pairs: int = 1000
    trace: bool = False

    @field_validator("strategies")
    @classmethod
    def _dedupe_strategies(cls, value: List[str]) -> List[str]:
        seen: List[str] = []
        for name in value:
            if name not in seen:
                seen.append(name)
        return seen

    def check(self) -> None:
        self.gallery.check()
        if self.trials < 1:
            raise ConfigurationError(f"trials must be >= 1, got {self.trials}")
        if self.max_dict_size < 1:
            raise ConfigurationError(f"max_dict_size must be >= 1, got {self.max_dict_size}")
        if self.per_print_generations < 1 or self.single_print_generations < 1:
            raise ConfigurationError("generation budgets must be positive")
        if not self.fmr_levels:
            raise ConfigurationError("fmr_levels is empty")
        for fmr in self.fmr_levels:
            if not 0.0 < fmr <= 1.0:
                raise ConfigurationError(f"fmr level {fmr} is outside (0, 1]")
        if not self.strategies:
            raise ConfigurationError("no strategy selected")
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigurationError(f"unknown strategies: {unknown}; expected a subset of {list(STRATEGIES)}")
        if self.gallery.user_count % 2 != 0:
            raise ConfigurationError(f"user_count must be even for a train/test split, got {self.gallery.user_count}")
        n, m = self.generator.latent_dim, self.gallery.feature_dim
        if not 1 <= n <= m:
            raise ConfigurationError(f"latent_dim must satisfy 1 <= n <= m, got n={n}, m={m}")
        if self.cmaes.sigma0 <= 0:
            raise ConfigurationError(f"sigma0 must be > 0, got {self.cmaes.sigma0}")
        if self.cmaes.population_size is not None and self.cmaes.population_size < 2:
            raise ConfigurationError(f"population_size must be >= 2, got {self.cmaes.population_size}")
        if self.min_fitness < 0:
            raise ConfigurationError("min_fitness must be >= 0")


# --- persisted documents ----------------------------------------------------

class GalleryUserDocument(BaseModel):
    user_id: int
    cluster_id: int
    center: List[float]
    impressions: List[List[float]]


class GalleryDocument(BaseModel):
    format_version: int = FORMAT_VERSION
    kind: str = "gallery"
    name: str = "gallery"
    seed: int
    feature_dim: int
    cluster_count: int
    impressions_per_user: int
    cluster_spread: float
    impression_noise: float
    cluster_centers: List[List[float]]
    users: List[GalleryUserDocument]


class GeneratorDocument(BaseModel):
    format_version: int = FORMAT_VERSION
    kind: str = "generator"
    seed: int
    feature_dim: int
    latent_dim: int
    projection: List[List[float]] = Field(..., description="m x n, row-major")
    offset: List[float]


class DictionaryEntryDocument(BaseModel):
    genome: List[float]
    template: List[float]
    match_train: str = Field(..., description="bitstring in user_id order")
    fitness: float
    strategy_tag: str
    generation_budget: int
    evaluations: int
    seed: int
    overlap: int = 0
    stagnation: int = 0


class DictionaryDocument(BaseModel):
    format_version: int = FORMAT_VERSION
    kind: str = "dictionary"
    strategy: str
    fmr: float
    max_size: int
    seed: int
    entries: List[DictionaryEntryDocument]


class RunManifest(BaseModel):
    format_version: int = FORMAT_VERSION
    command: str
    created_at: datetime = Field(default_factory=datetime.utcnow)
    config: Dict = Field(default_factory=dict)
    seed: int
    component_versions: Dict[str, str] = Field(default_factory=dict)
    artifacts: List[str] = Field(default_factory=list)
    timings: Dict[str, float] = Field(default_factory=dict)
    exit_code: int = 0

    def add_artifact(self, path: Union[str, Path]) -> None:
        path = str(path)
        if path not in self.artifacts:
            self.artifacts.append(path)


def parse_model(cls: Type[ModelT], text: str, source: str = "<string>") -> ModelT:
    """Validate JSON text into ``cls``; any parse / validation problem becomes ConfigurationError."""
    try:
        return cls.model_validate_json(text)
    except ValidationError as e:
        raise ConfigurationError(f"{source}: invalid {cls.__name__}: {e}") from e


def load_model(cls: Type[ModelT], path: Union[str, Path]) -> ModelT:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read {path}: {e}") from e
    return parse_model(cls, text, source=str(path))


def load_experiment_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict] = None) -> ExperimentConfig:
    """
    读取实验配置文件并应用覆盖项（cli 参数优先于文件）。

    :param path: JSON 配置文件；None 时使用内置默认配置
    :param overrides: 顶层字段覆盖，值为 None 的键被忽略
    """
    base = load_model(ExperimentConfig, path) if path is not None else ExperimentConfig()
    if overrides:
        data = base.model_dump()
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            base = ExperimentConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigurationError(f"invalid override: {e}") from e
    base.check()
    return base


def config_snapshot(config: BaseModel) -> str:
    """Canonical one-line JSON of a config, used in file header blocks."""
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
