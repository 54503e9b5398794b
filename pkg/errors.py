# errors.py
"""
Jerarquía de excepciones del proyecto.

Dos familias principales:
1. DataError: fallos atribuibles a los datos o a la configuración del usuario.
   La CLI los traduce a código de salida 1.
2. SamplerError: fallos internos del muestreador MCMC. Código de salida 2.
"""
from typing import Iterable, Optional, Sequence


class SurrogacyError(Exception):
    """Raíz de todas las excepciones propias."""


class DataError(SurrogacyError, ValueError):
    """Error en los datos de entrada o en la configuración."""


class SamplerError(SurrogacyError, RuntimeError):
    """Error durante el muestreo MCMC."""


# --- Errores de lectura del CSV ---

class MalformedRow(DataError):
    def __init__(self, line: int, detail: str = ""):
        self.line = line
        self.detail = detail
        super().__init__(f"Fila mal formada en la línea {line}: {detail}")


class MissingColumn(DataError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Falta la columna obligatoria '{name}'")


class DuplicateContrast(DataError):
    def __init__(self, study_id: str, contrast_id: str):
        self.study_id = study_id
        self.contrast_id = contrast_id
        super().__init__(f"Contraste duplicado: estudio '{study_id}', contraste '{contrast_id}'")


class DatasetInvalid(DataError):
    """El dataset tiene hallazgos de severidad 'error'."""

    def __init__(self, findings: Sequence):
        self.findings = list(findings)
        resumen = "; ".join(f.message for f in self.findings[:5])
        super().__init__(f"Dataset no válido ({len(self.findings)} errores): {resumen}")


class NotPositiveSemiDefinite(DataError):
    def __init__(self, study_id: str, min_eigenvalue: float):
        self.study_id = study_id
        self.min_eigenvalue = min_eigenvalue
        super().__init__(
            f"La matriz de covarianza del estudio '{study_id}' no es semidefinida positiva "
            f"(autovalor mínimo {min_eigenvalue:.3e}) y la reparación está desactivada"
        )


class UnknownTracer(DataError):
    def __init__(self, study_ids: Iterable[str] = ()):
        self.study_ids = sorted(set(study_ids))
        if self.study_ids:
            msg = f"Sin ecuación de conversión publicada para los estudios: {', '.join(self.study_ids)}"
        else:
            msg = "Sin ecuación de conversión publicada para el trazador 'other'"
        super().__init__(msg)


# --- Errores de ajuste ---

class InsufficientData(DataError):
    def __init__(self, n_contrasts: int, minimum: int = 3, what: str = "contrastes"):
        self.n_contrasts = n_contrasts
        self.minimum = minimum
        super().__init__(f"Datos insuficientes: {n_contrasts} {what}, se necesitan al menos {minimum}")


class MixedOutcome(DataError):
    def __init__(self, outcomes: Iterable[str]):
        self.outcomes = sorted(set(outcomes))
        super().__init__(f"El ajuste mezcla resultados clínicos: {', '.join(self.outcomes)}")


class MixedScale(DataError):
    def __init__(self, scales: Iterable[str]):
        self.scales = sorted(set(scales))
        super().__init__(f"El ajuste mezcla escalas del subrogado: {', '.join(self.scales)}")


class UnknownTreatment(DataError):
    def __init__(self, treatment: str):
        self.treatment = treatment
        super().__init__(f"Tratamiento desconocido en el dataset: '{treatment}'")


class SingleTreatment(DataError):
    def __init__(self, treatment: Optional[str] = None):
        super().__init__(f"El modelo jerárquico necesita al menos dos tratamientos (solo hay '{treatment}')")


class TreatmentMismatch(DataError):
    def __init__(self, left: Iterable[str], right: Iterable[str]):
        self.left = sorted(set(left))
        self.right = sorted(set(right))
        super().__init__(f"Los tratamientos no coinciden: {self.left} frente a {self.right}")


class MissingCovariate(DataError):
    def __init__(self, covariate: str, keys: Iterable[str]):
        self.covariate = covariate
        self.keys = list(keys)
        super().__init__(f"Falta la covariable '{covariate}' en {len(self.keys)} contrastes: {', '.join(self.keys[:5])}")


class EmptyRecords(DataError):
    def __init__(self):
        super().__init__("No hay registros de predicción")


class InvalidDesign(DataError):
    def __init__(self, detail: str):
        super().__init__(f"Diseño de simulación no válido: {detail}")


class UnknownParameter(DataError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Parámetro desconocido: '{name}'")


class ConfigError(DataError):
    """Configuración de ejecución no válida o fichero ausente."""


# --- Errores del muestreador ---

class DivergentChain(SamplerError):
    def __init__(self, chain: int, iteration: int, block: str = ""):
        self.chain = chain
        self.iteration = iteration
        super().__init__(f"La cadena {chain} divergió en la iteración {iteration} (bloque '{block}')")


class InitOutOfSupport(SamplerError):
    def __init__(self, chain: int):
        self.chain = chain
        super().__init__(f"El estado inicial de la cadena {chain} está fuera del soporte de la posterior")
