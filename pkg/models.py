# models.py
"""
Modelos Pydantic del dominio: contrastes de ensayos, dataset, resúmenes de la
posterior, veredictos de subrogación, registros de predicción y las filas de los
ficheros emitidos (cada fichero CSV se re-lee con su propio modelo).
"""
from enum import Enum
from typing import Any, Dict, FrozenSet, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator


class SurrogateScale(str, Enum):
    SUVR = "SUVR"
    CENTILOID = "Centiloid"


class Tracer(str, Enum):
    FLORBETAPIR = "florbetapir"
    FLORBETABEN = "florbetaben"
    FLUTEMETAMOL = "flutemetamol"
    OTHER = "other"


class Outcome(str, Enum):
    CDR_SOB = "CDR-SOB"
    ADAS_COG = "ADAS-Cog"
    MMSE = "MMSE"


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"


# --- MODELO BASE PARA DATOS INMUTABLES ---

class FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True)


class TrialContrast(FrozenModel):
    """Un contraste activo frente a placebo (diferencia en el cambio desde la basal)."""
    study_id: str
    treatment: str
    contrast_id: str
    y1: float
    se1: float
    surrogate_scale: SurrogateScale
    tracers: FrozenSet[Tracer] = frozenset()
    t_surrogate: float
    y2: float
    se2: float
    outcome: Outcome
    adascog_variant: Optional[int] = None
    t_final: float
    n_final: int
    rho_within: Optional[float] = None
    aria_effect: Optional[float] = None
    apoe_prop: Optional[float] = None
    imputed_scale: bool = False
    # Agrupa filas del mismo brazo medidas en varios tiempos del subrogado.
    arm: Optional[str] = None

    @field_validator("adascog_variant")
    @classmethod
    def _variant(cls, v: Optional[int]) -> Optional[int]:
        if v is not None and v not in (11, 12, 13, 14):
            raise ValueError(f"Variante de ADAS-Cog no reconocida: {v}")
        return v

    @property
    def key(self) -> str:
        return f"{self.study_id}/{self.contrast_id}"


class Dataset(FrozenModel):
    contrasts: Tuple[TrialContrast, ...]
    provenance: str = ""

    @property
    def study_ids(self) -> List[str]:
        """Identificadores de estudio en orden de primera aparición."""
        return list(dict.fromkeys(c.study_id for c in self.contrasts))

    @property
    def treatments(self) -> List[str]:
        return list(dict.fromkeys(c.treatment for c in self.contrasts))

    def __len__(self) -> int:
        return len(self.contrasts)


class ValidationFinding(FrozenModel):
    severity: Severity
    code: str
    message: str
    study_id: Optional[str] = None
    contrast_id: Optional[str] = None


class ValidationReport(FrozenModel):
    findings: Tuple[ValidationFinding, ...] = ()

    @property
    def errors(self) -> List[ValidationFinding]:
        return [f for f in self.findings if f.severity == Severity.ERROR]

    @property
    def warnings(self) -> List[ValidationFinding]:
        return [f for f in self.findings if f.severity == Severity.WARNING]

    @property
    def ok(self) -> bool:
        return not self.errors


# --- Resultados de la posterior ---

class PosteriorSummary(BaseModel):
    name: str
    mean: float
    sd: float
    q2_5: float
    q50: float
    q97_5: float
    ess: Optional[float] = None
    rhat: Optional[float] = None


class SurrogacyVerdict(BaseModel):
    """Criterios de subrogación a nivel de ensayo."""
    intercept_contains_zero: bool
    slope_excludes_zero: bool
    variance_below_threshold: bool
    psi2_threshold: float
    label: str  # supported | weak | not-supported


class WidthReduction(BaseModel):
    """Reducción porcentual (en tanto por uno) de la anchura del CrI al 95%."""
    per_treatment: Dict[str, Dict[str, float]]
    average: Dict[str, float]
    minimum: Dict[str, float]
    maximum: Dict[str, float]


class PredictionRecord(BaseModel):
    study_id: str
    contrast_id: str
    observed: float
    obs_lo: float
    obs_hi: float
    pred: float
    pred_lo: float
    pred_hi: float
    covered: bool


class LooMetrics(BaseModel):
    coverage: float
    mad: float
    width_ratio: float
    n_records: int


# --- Filas de los ficheros de datos para gráficos ---

class SummaryRow(BaseModel):
    scope: str
    parameter: str
    mean: float
    sd: float
    q2_5: float
    q50: float
    q97_5: float
    ess: Optional[float] = None
    rhat: Optional[float] = None
    weight: Optional[float] = None


class BubbleRow(BaseModel):
    study_id: str
    contrast_id: str
    y1: float
    y2: float
    n_final: int
    treatment: str
    imputed: bool


class BandRow(BaseModel):
    treatment: str
    x: float
    mean: float
    lo: float
    hi: float


class ForestRow(BaseModel):
    treatment: str
    study_id: str
    contrast_id: str
    endpoint: str  # surrogate | final, o observed | predicted en loo_forest.csv
    effect: float
    lo: float
    hi: float
    imputed: bool


class SbcParameterResult(BaseModel):
    parameter: str
    ranks: List[int]
    n_draws: int
    coverage: float
    chi2: Optional[float] = None
    p_value: Optional[float] = None
    histogram: List[int] = Field(default_factory=list)


class SbcReport(BaseModel):
    reps: int
    model_kind: str
    parameters: Dict[str, SbcParameterResult]
    extra: Dict[str, Any] = Field(default_factory=dict)


# --- Diagnósticos MCMC ---

class ParameterDiagnostics(BaseModel):
    name: str
    ess: Optional[float] = None
    rhat: Optional[float] = None
    autocorrelation: List[float] = Field(default_factory=list)
    # Parámetro constante en todas las extracciones: ESS y R-hat no están definidos.
    degenerate: bool = False


class DiagnosticsReport(BaseModel):
    n_chains: int
    draws_per_chain: int
    parameters: Dict[str, ParameterDiagnostics]
    acceptance: Dict[str, List[float]] = Field(default_factory=dict)

    @property
    def degenerate(self) -> List[str]:
        return [name for name, p in self.parameters.items() if p.degenerate]
