import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.errors import ConfigError

load_dotenv()

# Base paths
BASE_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = Path(os.getenv("SOCIALDIFF_DATA_DIR", str(BASE_DIR / "data")))
OUTPUT_DIR = Path(os.getenv("SOCIALDIFF_OUTPUT_DIR", str(BASE_DIR / "output")))

# Run settings
DEFAULT_SEED = int(os.getenv("SOCIALDIFF_SEED", "20160101"))
N_JOBS = int(os.getenv("SOCIALDIFF_N_JOBS", "1"))
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

# Social-influence covariates for the choice model variants
COVARIATES = ("local-imitators", "global-imitators", "local-adopters", "global-adopters", "none")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class UkfSettings(_Section):
    alpha: float = Field(1e-1, gt=0)
    kappa: float = 0.0
    beta: float = 2.0


class GaSettings(_Section):
    population: int = Field(64, ge=4)
    generations: int = Field(200, ge=1)
    tournament: int = Field(3, ge=1)
    blend_alpha: float = Field(0.5, ge=0)
    mutation_sigma: float = Field(0.1, ge=0)
    mutation_decay: float = Field(0.99, gt=0, le=1)
    mutation_rate: float = Field(0.2, ge=0, le=1)
    elite: int = Field(2, ge=1)
    init_spread: float = Field(0.2, ge=0)
    n_jobs: int = N_JOBS


class McemSettings(_Section):
    iterations: int = Field(20, ge=1)
    samples: int = Field(50, ge=1)
    initial_cov: float = Field(1e-4, gt=0)
    min_days: int = Field(30, ge=2)
    literal_transition: bool = False
    profile_covariance: bool = True
    tolerance_se: float = Field(2.0, ge=0)
    market_scale: float = Field(1.5, gt=0)
    ga: GaSettings = Field(default_factory=lambda: GaSettings(generations=40))


class McmcSettings(_Section):
    burn_in: int = Field(2000, ge=0)
    keep: int = Field(10000, ge=1)
    thin: int = Field(10, ge=1)
    hessian_rebuild: int = Field(100, ge=1)
    target_accept: float = Field(0.23, gt=0, lt=1)
    proposal_scale: Optional[float] = None
    max_components: Optional[int] = None
    mode_prior_var: float = Field(100.0, gt=0)


class DpSettings(_Section):
    grid_size: int = Field(64, ge=2)
    a_bounds: Tuple[float, float] = (1e-5, 50.0)
    nu_offset_bounds: Tuple[float, float] = (1e-5, 80.0)
    vartheta_bounds: Tuple[float, float] = (1e-5, 600.0)
    alpha_power: float = Field(0.8, gt=0)
    max_modal_clusters: int = Field(30, ge=1)
    cluster_law: Literal["exact", "approximate"] = "exact"
    delta_prior_var: float = Field(100.0, gt=0)

    @field_validator("a_bounds", "nu_offset_bounds", "vartheta_bounds")
    @classmethod
    def _ordered(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0 < low < high:
            raise ValueError("bounds must satisfy 0 < low < high")
        return value


class FracLikSettings(_Section):
    w: float = Field(0.05, ge=0, lt=1)


class PolicySettings(_Section):
    upper_multiplier: float = Field(3.0, gt=0)
    population: int = Field(128, ge=4)
    generations: int = Field(400, ge=1)
    n_draws: int = Field(50, ge=1)
    retries: int = Field(2, ge=0)
    resimulate_history: bool = False


class SimulationSettings(_Section):
    round_observations: bool = True
    monotone_observations: bool = True


class PipelineConfig(_Section):
    """Structured run configuration; every section has working defaults."""

    seed: int = DEFAULT_SEED
    ukf: UkfSettings = Field(default_factory=UkfSettings)
    ga: GaSettings = Field(default_factory=GaSettings)
    mcem: McemSettings = Field(default_factory=McemSettings)
    mcmc: McmcSettings = Field(default_factory=McmcSettings)
    dp: DpSettings = Field(default_factory=DpSettings)
    fraclik: FracLikSettings = Field(default_factory=FracLikSettings)
    policy: PolicySettings = Field(default_factory=PolicySettings)
    simulation: SimulationSettings = Field(default_factory=SimulationSettings)
    covariates: Tuple[str, ...] = COVARIATES
    monotonize_inputs: bool = True

    @field_validator("covariates")
    @classmethod
    def _known_covariates(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        unknown = [c for c in value if c not in COVARIATES]
        if unknown:
            raise ValueError(f"unknown covariates: {unknown}")
        return value


def _coerce(raw: str) -> Any:
    """Interpret a CLI override value as JSON, falling back to a plain string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply ``section.key=value`` overrides onto a raw config mapping."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override '{item}' has an empty key")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{item}' descends into a scalar")
        node[keys[-1]] = _coerce(raw)
    return data


def load_config(
    path: Optional[Path] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
) -> PipelineConfig:
    """
    Load the structured configuration.

    Args:
        path: Optional JSON config file
        overrides: ``section.key=value`` strings applied after the file
        seed: Optional seed override (takes precedence over everything)

    Returns:
        Validated PipelineConfig
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")

    apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed

    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
