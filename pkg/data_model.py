# data_model.py
"""
Esquema de datos a nivel de contraste, validación y construcción de los bloques
por estudio con su matriz de covarianza intra-estudio (ensayos multibrazo incluidos).
"""
import io
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from errors import DatasetInvalid, DuplicateContrast, MalformedRow, MissingColumn, NotPositiveSemiDefinite
from models import (
    Dataset, Outcome, Severity, SurrogateScale, TrialContrast, ValidationFinding, ValidationReport,
)

logger = logging.getLogger(__name__)

# --- Esquema del CSV ---

REQUIRED_COLUMNS: Tuple[str, ...] = (
    "study_id", "treatment", "contrast_id", "y1", "se1", "surrogate_scale", "tracers",
    "t_surrogate_weeks", "y2", "se2", "outcome", "t_final_weeks", "n_final",
)
OPTIONAL_COLUMNS: Tuple[str, ...] = (
    "adascog_variant", "rho_within", "aria_effect", "apoe_prop", "imputed_scale", "arm",
)
CSV_COLUMNS: Tuple[str, ...] = (
    "study_id", "treatment", "contrast_id", "y1", "se1", "surrogate_scale", "tracers",
    "t_surrogate_weeks", "y2", "se2", "outcome", "adascog_variant", "t_final_weeks", "n_final",
    "rho_within", "aria_effect", "apoe_prop", "imputed_scale", "arm",
)
# Umbral por debajo del cual un autovalor negativo se considera indefinición real.
PSD_TOLERANCE = 1e-10

_SCALE_ALIASES = {s.value.lower(): s for s in SurrogateScale}
_OUTCOME_ALIASES = {o.value.lower(): o for o in Outcome}
_OUTCOME_ALIASES.update({"cdr-sb": Outcome.CDR_SOB, "cdrsob": Outcome.CDR_SOB, "adascog": Outcome.ADAS_COG})


@dataclass(frozen=True)
class StudyBlock:
    """
    Todos los contrastes de un estudio con su covarianza conjunta.

    Filas/columnas de `sigma_within` intercaladas por contraste: (y1_1, y2_1, y1_2, y2_2, ...).
    `y2_observed` permite ocultar el resultado final de un estudio (validación cruzada)
    conservando su efecto sobre el subrogado.
    """
    study_id: str
    contrasts: Tuple[TrialContrast, ...]
    sigma_within: np.ndarray
    resolved_rho: Tuple[float, ...]
    y2_observed: Tuple[bool, ...] = ()
    psd_repaired: bool = False
    min_eigenvalue: float = 0.0

    def __post_init__(self):
        if not self.y2_observed:
            object.__setattr__(self, "y2_observed", tuple(True for _ in self.contrasts))
        self.sigma_within.setflags(write=False)

    @property
    def size(self) -> int:
        return len(self.contrasts)

    def hold_out_outcome(self) -> "StudyBlock":
        """Copia del bloque con todos los y2 no observados."""
        return replace(self, y2_observed=tuple(False for _ in self.contrasts))

    def restricted_to(self, indices: Sequence[int]) -> "StudyBlock":
        """Sub-bloque con los contrastes indicados (y la submatriz correspondiente)."""
        rows = [r for i in indices for r in (2 * i, 2 * i + 1)]
        sub = np.array(self.sigma_within[np.ix_(rows, rows)])
        return StudyBlock(
            study_id=self.study_id,
            contrasts=tuple(self.contrasts[i] for i in indices),
            sigma_within=sub,
            resolved_rho=tuple(self.resolved_rho[i] for i in indices),
            y2_observed=tuple(self.y2_observed[i] for i in indices),
            psd_repaired=self.psd_repaired,
            min_eigenvalue=self.min_eigenvalue,
        )


# --- Lectura y escritura ---

def _cell(raw: str) -> Optional[str]:
    value = raw.strip()
    return value or None


def _parse_float(raw: Optional[str], column: str, line: int) -> Optional[float]:
    if raw is None:
        return None
    try:
        value = float(raw)
    except ValueError:
        raise MalformedRow(line, f"'{column}' no es numérico: {raw!r}") from None
    if not math.isfinite(value):
        raise MalformedRow(line, f"'{column}' no es finito: {raw!r}")
    return value


def _parse_int(raw: Optional[str], column: str, line: int) -> Optional[int]:
    value = _parse_float(raw, column, line)
    if value is None:
        return None
    if not float(value).is_integer():
        raise MalformedRow(line, f"'{column}' debe ser entero: {raw!r}")
    return int(value)


def _parse_bool(raw: Optional[str], column: str, line: int) -> bool:
    if raw is None:
        return False
    lowered = raw.lower()
    if lowered in ("1", "true", "yes", "y", "t"):
        return True
    if lowered in ("0", "false", "no", "n", "f"):
        return False
    raise MalformedRow(line, f"'{column}' no es booleano: {raw!r}")


def _require(value, column: str, line: int):
    if value is None:
        raise MalformedRow(line, f"'{column}' está vacío")
    return value


def _parse_row(row: Dict[str, str], line: int) -> TrialContrast:
    get = lambda col: _cell(row.get(col, "") or "")  # noqa: E731

    scale_raw = _require(get("surrogate_scale"), "surrogate_scale", line)
    scale = _SCALE_ALIASES.get(scale_raw.lower())
    if scale is None:
        raise MalformedRow(line, f"escala del subrogado desconocida: {scale_raw!r}")
    outcome_raw = _require(get("outcome"), "outcome", line)
    outcome = _OUTCOME_ALIASES.get(outcome_raw.lower())
    if outcome is None:
        raise MalformedRow(line, f"resultado clínico desconocido: {outcome_raw!r}")
    tracers_raw = get("tracers") or ""
    tracers = [t.strip().lower() for t in tracers_raw.split(";") if t.strip()]

    try:
        return TrialContrast(
            study_id=_require(get("study_id"), "study_id", line),
            treatment=_require(get("treatment"), "treatment", line),
            contrast_id=_require(get("contrast_id"), "contrast_id", line),
            y1=_require(_parse_float(get("y1"), "y1", line), "y1", line),
            se1=_require(_parse_float(get("se1"), "se1", line), "se1", line),
            surrogate_scale=scale,
            tracers=frozenset(tracers),
            t_surrogate=_require(_parse_float(get("t_surrogate_weeks"), "t_surrogate_weeks", line), "t_surrogate_weeks", line),
            y2=_require(_parse_float(get("y2"), "y2", line), "y2", line),
            se2=_require(_parse_float(get("se2"), "se2", line), "se2", line),
            outcome=outcome,
            adascog_variant=_parse_int(get("adascog_variant"), "adascog_variant", line),
            t_final=_require(_parse_float(get("t_final_weeks"), "t_final_weeks", line), "t_final_weeks", line),
            n_final=_require(_parse_int(get("n_final"), "n_final", line), "n_final", line),
            rho_within=_parse_float(get("rho_within"), "rho_within", line),
            aria_effect=_parse_float(get("aria_effect"), "aria_effect", line),
            apoe_prop=_parse_float(get("apoe_prop"), "apoe_prop", line),
            imputed_scale=_parse_bool(get("imputed_scale"), "imputed_scale", line),
            arm=get("arm"),
        )
    except ValidationError as e:
        raise MalformedRow(line, str(e.errors()[0].get("msg", e))) from None


def parse_dataset(source: Union[TextIO, str], provenance: str = "") -> Dataset:
    """
    Lee un dataset de contrastes desde un flujo de texto CSV.

    Args:
        source: Flujo de caracteres (o texto) con la cabecera documentada.
        provenance: Nota libre sobre el origen de los datos.

    Returns:
        El Dataset, preservando el orden de las filas. Las columnas opcionales
        desconocidas se ignoran.

    Raises:
        MissingColumn, MalformedRow, DuplicateContrast.
    """
    stream = io.StringIO(source) if isinstance(source, str) else source
    try:
        df = pd.read_csv(stream, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise MissingColumn(REQUIRED_COLUMNS[0]) from None
    except pd.errors.ParserError as e:
        raise MalformedRow(0, f"CSV mal formado: {e}") from None
    df.columns = [str(c).strip() for c in df.columns]
    for col in REQUIRED_COLUMNS:
        if col not in df.columns:
            raise MissingColumn(col)

    contrasts: List[TrialContrast] = []
    seen: set = set()
    for idx, row in enumerate(df.to_dict(orient="records")):
        line = idx + 2  # la cabecera ocupa la línea 1
        contrast = _parse_row(row, line)
        key = (contrast.study_id, contrast.contrast_id, contrast.t_surrogate if contrast.arm else None)
        if key in seen:
            raise DuplicateContrast(contrast.study_id, contrast.contrast_id)
        seen.add(key)
        contrasts.append(contrast)

    logger.info(f"Dataset leído: {len(contrasts)} contrastes de {len({c.study_id for c in contrasts})} estudios")
    return Dataset(contrasts=tuple(contrasts), provenance=provenance)


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Lee un dataset desde un fichero CSV."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        return parse_dataset(fh, provenance=f"csv:{path.name}")


def _format_number(value: Optional[float]) -> str:
    if value is None:
        return ""
    return repr(float(value))


def dataset_to_frame(d: Dataset) -> pd.DataFrame:
    """Dataset en el esquema CSV documentado (celdas vacías = opcional ausente)."""
    rows = []
    for c in d.contrasts:
        rows.append({
            "study_id": c.study_id,
            "treatment": c.treatment,
            "contrast_id": c.contrast_id,
            "y1": _format_number(c.y1),
            "se1": _format_number(c.se1),
            "surrogate_scale": c.surrogate_scale.value,
            "tracers": ";".join(sorted(t.value for t in c.tracers)),
            "t_surrogate_weeks": _format_number(c.t_surrogate),
            "y2": _format_number(c.y2),
            "se2": _format_number(c.se2),
            "outcome": c.outcome.value,
            "adascog_variant": "" if c.adascog_variant is None else str(c.adascog_variant),
            "t_final_weeks": _format_number(c.t_final),
            "n_final": str(c.n_final),
            "rho_within": _format_number(c.rho_within),
            "aria_effect": _format_number(c.aria_effect),
            "apoe_prop": _format_number(c.apoe_prop),
            "imputed_scale": "true" if c.imputed_scale else "false",
            "arm": c.arm or "",
        })
    return pd.DataFrame(rows, columns=list(CSV_COLUMNS))


def write_dataset(d: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_to_frame(d).to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Dataset escrito en {path} ({len(d)} contrastes)")
    return path


# --- Validación ---

def validate_dataset(d: Dataset) -> ValidationReport:
    """
    Comprueba los invariantes del esquema y devuelve los hallazgos.

    Los errores bloquean el ajuste; los avisos (p. ej. variantes de ADAS-Cog
    mezcladas, fuente conocida de heterogeneidad) no.
    """
    findings: List[ValidationFinding] = []

    def add(severity, code, message, c: Optional[TrialContrast] = None):
        findings.append(ValidationFinding(
            severity=severity, code=code, message=message,
            study_id=c.study_id if c else None, contrast_id=c.contrast_id if c else None,
        ))

    if not d.contrasts:
        add(Severity.ERROR, "empty_dataset", "El dataset no contiene contrastes")
        return ValidationReport(findings=tuple(findings))

    seen = set()
    for c in d.contrasts:
        if c.se1 <= 0 or c.se2 <= 0:
            add(Severity.ERROR, "nonpositive_standard_error",
                f"nonpositive standard error (se1={c.se1}, se2={c.se2})", c)
        if c.n_final < 1:
            add(Severity.ERROR, "invalid_n_final", f"n_final debe ser >= 1 (valor {c.n_final})", c)
        if c.rho_within is not None and not -1 < c.rho_within < 1:
            add(Severity.ERROR, "rho_out_of_range", f"rho_within fuera de (-1, 1): {c.rho_within}", c)
        if c.apoe_prop is not None and not 0 <= c.apoe_prop <= 1:
            add(Severity.ERROR, "apoe_out_of_range", f"apoe_prop fuera de [0, 1]: {c.apoe_prop}", c)
        key = (c.study_id, c.contrast_id, c.t_surrogate if c.arm else None)
        if key in seen:
            add(Severity.ERROR, "duplicate_contrast", "Contraste duplicado", c)
        seen.add(key)
        if c.outcome == Outcome.ADAS_COG and c.adascog_variant is None:
            add(Severity.WARNING, "missing_adascog_variant", "Contraste ADAS-Cog sin variante declarada", c)
        if c.outcome != Outcome.ADAS_COG and c.adascog_variant is not None:
            add(Severity.WARNING, "unexpected_adascog_variant",
                f"Variante de ADAS-Cog declarada para el resultado {c.outcome.value}", c)

    variants = {c.adascog_variant for c in d.contrasts
                if c.outcome == Outcome.ADAS_COG and c.adascog_variant is not None}
    if len(variants) > 1:
        add(Severity.WARNING, "mixed_adascog_variants",
            f"mixed ADAS-Cog variants: {', '.join(str(v) for v in sorted(variants))}")
    outcomes = {c.outcome for c in d.contrasts}
    if len(outcomes) > 1:
        add(Severity.WARNING, "mixed_outcomes",
            f"El dataset mezcla resultados ({', '.join(sorted(o.value for o in outcomes))}); filtre antes de ajustar")
    scales = {c.surrogate_scale for c in d.contrasts}
    if len(scales) > 1:
        add(Severity.WARNING, "mixed_surrogate_scales",
            "El dataset mezcla escalas del subrogado; armonice antes de ajustar")

    report = ValidationReport(findings=tuple(findings))
    logger.info(f"Validación: {len(report.errors)} errores, {len(report.warnings)} avisos")
    return report


# --- Filtros de análisis ---

def select_outcome(d: Dataset, outcome: Outcome) -> Dataset:
    kept = tuple(c for c in d.contrasts if c.outcome == outcome)
    logger.info(f"Filtro de resultado {outcome.value}: {len(kept)} de {len(d)} contrastes")
    return d.model_copy(update={"contrasts": kept})


def select_timepoints(d: Dataset, policy: str,
                      findings: Optional[List[ValidationFinding]] = None) -> Dataset:
    """
    Aplica la política de tiempos de seguimiento.

    Las filas se agrupan por (study_id, arm); sin columna `arm` cada contraste es
    su propio grupo. `earliest` conserva el primer tiempo del subrogado de cada
    grupo; `matched` conserva las filas con t_surrogate == t_final (la última si hay varias).

    Si se pasa `findings`, cada fila descartada añade allí un aviso
    `timepoint_dropped` con el motivo.
    """
    policy = getattr(policy, "value", policy)
    groups: Dict[Tuple[str, str], List[int]] = defaultdict(list)
    for i, c in enumerate(d.contrasts):
        groups[(c.study_id, c.arm or f"contrast:{c.contrast_id}")].append(i)

    keep: set = set()
    reasons: Dict[int, str] = {}
    for indices in groups.values():
        if policy == "earliest":
            first = min(indices, key=lambda i: (d.contrasts[i].t_surrogate, i))
            keep.add(first)
            for i in indices:
                if i != first:
                    reasons[i] = (f"t_surrogate={d.contrasts[i].t_surrogate:g} posterior al primero "
                                  f"({d.contrasts[first].t_surrogate:g})")
        elif policy == "matched":
            matched = [i for i in indices if math.isclose(d.contrasts[i].t_surrogate, d.contrasts[i].t_final)]
            chosen = max(matched, key=lambda i: (d.contrasts[i].t_final, -i)) if matched else None
            if chosen is not None:
                keep.add(chosen)
            for i in indices:
                c = d.contrasts[i]
                if i == chosen:
                    continue
                if i in matched:
                    reasons[i] = f"hay un tiempo emparejado posterior a t_final={c.t_final:g}"
                else:
                    reasons[i] = f"t_surrogate={c.t_surrogate:g} distinto de t_final={c.t_final:g}"
        else:
            raise ValueError(f"Política de tiempos desconocida: {policy}")

    for i in sorted(reasons):
        c = d.contrasts[i]
        logger.warning(f"Política de tiempos '{policy}': se descarta {c.key} ({reasons[i]})")
        if findings is not None:
            findings.append(ValidationFinding(
                severity=Severity.WARNING, code="timepoint_dropped",
                message=f"Descartado por la política '{policy}': {reasons[i]}",
                study_id=c.study_id, contrast_id=c.contrast_id,
            ))
    kept = tuple(c for i, c in enumerate(d.contrasts) if i in keep)
    if len(kept) < len(d):
        logger.info(f"Política de tiempos '{policy}': se descartan {len(d) - len(kept)} filas")
    return d.model_copy(update={"contrasts": kept})


def drop_imputed(d: Dataset) -> Dataset:
    kept = tuple(c for c in d.contrasts if not c.imputed_scale)
    logger.info(f"Se excluyen {len(d) - len(kept)} contrastes con escala imputada")
    return d.model_copy(update={"contrasts": kept})


# --- Bloques por estudio ---

def within_study_covariance(contrasts: Sequence[TrialContrast], rhos: Sequence[float],
                            shared_control_rho: float) -> np.ndarray:
    """
    Covarianza conjunta de todos los (y1, y2) de un estudio.

    - Diagonal: errores estándar al cuadrado.
    - Dentro de un contraste: rho * se1 * se2.
    - Entre contrastes (placebo compartido): mismo resultado, shared_control_rho * se * se;
      resultados cruzados, shared_control_rho * media(rho_a, rho_b) * se1_a * se2_b.
    """
    k = len(contrasts)
    se = np.array([[c.se1, c.se2] for c in contrasts], dtype=float)  # (K, 2)
    rho = np.asarray(rhos, dtype=float)
    corr = np.empty((2 * k, 2 * k))
    for a in range(k):
        for b in range(k):
            if a == b:
                block = np.array([[1.0, rho[a]], [rho[a], 1.0]])
            else:
                cross = shared_control_rho * 0.5 * (rho[a] + rho[b])
                block = np.array([[shared_control_rho, cross], [cross, shared_control_rho]])
            corr[2 * a:2 * a + 2, 2 * b:2 * b + 2] = block
    sd = se.reshape(-1)
    return corr * np.outer(sd, sd)


def _repair_psd(sigma: np.ndarray) -> np.ndarray:
    eigval, eigvec = np.linalg.eigh(sigma)
    clipped = (eigvec * np.clip(eigval, 0.0, None)) @ eigvec.T
    return 0.5 * (clipped + clipped.T)


def build_study_blocks(d: Dataset, default_rho: float = 0.0, shared_control_rho: float = 0.5,
                       repair_psd: bool = True) -> List[StudyBlock]:
    """
    Agrupa los contrastes por estudio y construye la covarianza intra-estudio.

    La correlación de cada contraste es `rho_within` si está presente y si no
    `default_rho`. Las matrices indefinidas se proyectan a la matriz semidefinida
    positiva más cercana recortando autovalores en 0 (queda registrado en el bloque).

    Raises:
        DatasetInvalid: Si el dataset tiene errores de validación.
        NotPositiveSemiDefinite: Si hace falta reparar y `repair_psd` es False.
    """
    for name, value in (("default_rho", default_rho), ("shared_control_rho", shared_control_rho)):
        if not -1 < value < 1:
            raise ValueError(f"{name} debe estar en (-1, 1): {value}")
    report = validate_dataset(d)
    if not report.ok:
        raise DatasetInvalid(report.errors)

    by_study: Dict[str, List[TrialContrast]] = defaultdict(list)
    for c in d.contrasts:
        by_study[c.study_id].append(c)

    blocks: List[StudyBlock] = []
    for study_id in d.study_ids:
        contrasts = by_study[study_id]
        rhos = [c.rho_within if c.rho_within is not None else default_rho for c in contrasts]
        sigma = within_study_covariance(contrasts, rhos, shared_control_rho)
        min_eig = float(np.linalg.eigvalsh(sigma).min())
        repaired = False
        if min_eig < -PSD_TOLERANCE:
            if not repair_psd:
                raise NotPositiveSemiDefinite(study_id, min_eig)
            logger.warning(f"Covarianza del estudio '{study_id}' indefinida (autovalor mínimo {min_eig:.3e}); "
                           f"se recortan los autovalores en 0")
            sigma = _repair_psd(sigma)
            repaired = True
        blocks.append(StudyBlock(
            study_id=study_id,
            contrasts=tuple(contrasts),
            sigma_within=sigma,
            resolved_rho=tuple(rhos),
            psd_repaired=repaired,
            min_eigenvalue=min_eig,
        ))
    logger.info(f"Construidos {len(blocks)} bloques de estudio "
                f"({sum(b.psd_repaired for b in blocks)} reparados)")
    return blocks


def blocks_for_treatment(blocks: Iterable[StudyBlock], treatment: str) -> List[StudyBlock]:
    """Restringe los bloques a los contrastes de un tratamiento (descarta estudios vacíos)."""
    result = []
    for b in blocks:
        idx = [i for i, c in enumerate(b.contrasts) if c.treatment == treatment]
        if idx:
            result.append(b if len(idx) == b.size else b.restricted_to(idx))
    return result
