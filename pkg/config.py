# config.py
"""
Fichero de Configuración Central basado en Pydantic.

Separa la configuración en varios contextos:
1. LoggingSettings: nivel y formato de los logs.
2. McmcSettings: protocolo de muestreo (iteraciones, burn-in, thinning, cadenas, semilla).
3. PriorConfig: distribuciones a priori de los modelos de subrogación.
4. CorrelationSettings: construcción de la covarianza intra-estudio.
5. RunConfig: una ejecución completa (entrada, filtros, modelo, salida).
6. SimDesign: diseño de los datasets sintéticos y de la calibración SBC.

Los valores por defecto reproducen el protocolo del análisis principal
(100.000 iteraciones, burn-in de 50.000, thinning de 10).
"""
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from errors import ConfigError
from models import Outcome, SurrogateScale

# --- Modelos de Configuración con Pydantic ---

class LoggingSettings(BaseModel):
    level: int = logging.INFO
    format: str = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    file: Optional[Path] = None
    # Nivel de mcmc, surrogacy, simgen y crossval; None = el nivel general.
    sampler_level: Optional[int] = None
    # Bibliotecas que solo muestran avisos salvo en DEBUG.
    quiet_loggers: List[str] = Field(default_factory=lambda: ["mcp", "asyncio"])


class McmcSettings(BaseModel):
    """Protocolo de muestreo de una cadena MCMC."""
    iterations: int = Field(100_000, gt=0)
    burn_in: int = Field(50_000, ge=0)
    thin: int = Field(10, gt=0)
    chains: int = Field(2, ge=1)
    seed: int = Field(1, ge=0, lt=2**64)
    adapt_window: int = Field(50, gt=0)
    # Solo controla el paralelismo entre cadenas; nunca cambia los resultados.
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_retained(self) -> "McmcSettings":
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in debe ser menor que iterations")
        if self.retained_per_chain < 100:
            raise ValueError(
                f"Se conservan {self.retained_per_chain} extracciones por cadena; se necesitan al menos 100"
            )
        return self

    @property
    def retained_per_chain(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


PsiPriorKind = Literal["uniform", "halfnormal", "gamma-precision", "fixed"]


class PriorConfig(BaseModel):
    """Distribuciones a priori. Todos los valores se reflejan en el informe."""
    psi_prior: PsiPriorKind = "uniform"
    psi_upper: float = Field(2.0, gt=0)
    psi_halfnormal_scale: float = Field(1.0, gt=0)
    gamma_shape: float = Field(0.001, gt=0)
    gamma_rate: float = Field(0.001, gt=0)
    psi_fixed: Optional[float] = Field(None, gt=0)

    coefficient_sd: float = Field(100.0, gt=0)
    delta1_mean: float = 0.0
    delta1_sd: float = Field(100.0, gt=0)

    # Modelos jerárquicos
    hypermean_sd: float = Field(100.0, gt=0)
    hyper_sd_scale: float = Field(1.0, gt=0)
    log_psi_mean: float = 0.0
    log_psi_mean_sd: float = Field(1.0, gt=0)
    log_psi_sd_scale: float = Field(1.0, gt=0)
    psi_structure: Literal["exchangeable", "common"] = "exchangeable"

    @model_validator(mode="after")
    def _check_fixed(self) -> "PriorConfig":
        if self.psi_prior == "fixed" and self.psi_fixed is None:
            raise ValueError("psi_prior='fixed' requiere psi_fixed")
        return self


class CorrelationSettings(BaseModel):
    """Correlaciones intra-estudio usadas al construir los bloques."""
    default_rho: float = Field(0.0, gt=-1, lt=1)
    shared_control_rho: float = Field(0.5, gt=-1, lt=1)
    repair_psd: bool = True


class TimepointPolicy(str, Enum):
    EARLIEST = "earliest"
    MATCHED = "matched"


# Estructura de brazos de la red de ensayos de referencia: 14 estudios de dos brazos,
# 6 de tres, 1 de cuatro y 2 de seis (39 contrastes).
REFERENCE_ARMS: List[int] = [2] * 14 + [3] * 6 + [4] + [6] * 2


class SimDesign(BaseModel):
    """
    Diseño de un dataset sintético. Los invariantes semánticos se comprueban en
    `simgen.validate_design` (InvalidDesign), no aquí.
    """
    n_studies: int = 23
    arms: Optional[List[int]] = None
    arm_probabilities: Dict[int, float] = Field(default_factory=lambda: {2: 14 / 23, 3: 6 / 23, 4: 1 / 23, 6: 2 / 23})
    lambda0: float = 0.0
    lambda1: float = 1.0
    psi2: float = 0.02
    delta1_mean: float = -0.2
    delta1_sd: float = 0.1
    se1_range: Tuple[float, float] = (0.02, 0.06)
    se2_range: Tuple[float, float] = (0.1, 0.3)
    rho_within: float = 0.0
    shared_control_rho: float = 0.5
    treatments: List[str] = Field(default_factory=lambda: ["A"])
    # Desplazamientos (lambda0, lambda1) por tratamiento respecto a la relación común.
    perturbations: Dict[str, Tuple[float, float]] = Field(default_factory=dict)
    psi2_by_treatment: Dict[str, float] = Field(default_factory=dict)
    outcome: Outcome = Outcome.CDR_SOB
    surrogate_scale: SurrogateScale = SurrogateScale.SUVR
    tracers: List[str] = Field(default_factory=lambda: ["florbetapir"])
    n_final_range: Tuple[int, int] = (100, 800)
    t_surrogate_weeks: float = 78.0
    t_final_weeks: float = 78.0
    seed: int = Field(1, ge=0)


ModelKind = Literal["pooled", "subgroup", "full", "partial"]
Covariate = Literal["none", "aria", "apoe"]


class RunConfig(BaseModel):
    """Configuración efectiva de una ejecución de la CLI."""
    input: Optional[Path] = None
    output_dir: Path = Path("output")
    outcome: Optional[Outcome] = Outcome.CDR_SOB
    scale: SurrogateScale = SurrogateScale.SUVR
    timepoints: TimepointPolicy = TimepointPolicy.EARLIEST
    model: ModelKind = "pooled"
    treatment: Optional[str] = None
    covariate: Covariate = "none"
    exclude_imputed: bool = False
    psi2_threshold: float = Field(0.05, gt=0)
    dump_draws: bool = False
    sbc_reps: int = Field(200, ge=1)

    priors: PriorConfig = Field(default_factory=PriorConfig)
    mcmc: McmcSettings = Field(default_factory=McmcSettings)
    correlation: CorrelationSettings = Field(default_factory=CorrelationSettings)
    simulation: SimDesign = Field(default_factory=SimDesign)

    @field_validator("input")
    @classmethod
    def _input_exists(cls, v: Optional[Path]) -> Optional[Path]:
        if v is not None and not Path(v).is_file():
            raise ValueError(f"El fichero de entrada no existe: {v}")
        return v


# --- Modelo Principal de Configuración ---

class Settings(BaseModel):
    """El objeto de configuración principal y único."""
    logging: LoggingSettings = Field(default_factory=LoggingSettings)
    run: RunConfig = Field(default_factory=RunConfig)


# --- Instancia de Configuración Global ---
settings = Settings()


def _deep_update(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_update(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Construye la RunConfig efectiva a partir de un fichero YAML y de overrides.

    Los overrides (normalmente, flags de la CLI) tienen prioridad sobre el fichero,
    y este sobre los valores por defecto.

    Args:
        path: Ruta opcional al fichero YAML de configuración.
        overrides: Diccionario anidado con los valores que sustituyen a los del fichero.

    Returns:
        La configuración validada.

    Raises:
        ConfigError: Si el fichero no existe, no es YAML válido o los valores no validan.
    """
    logger = logging.getLogger(__name__)
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Fichero de configuración no encontrado: {path}")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"YAML no válido en {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"El fichero {path} debe contener un mapa clave-valor")
        data = loaded
        logger.info(f"Configuración cargada desde {path}")
    if overrides:
        data = _deep_update(data, overrides)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Configuración no válida: {e}") from e
