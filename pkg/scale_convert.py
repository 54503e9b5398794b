# scale_convert.py
"""
Conversión de efectos del subrogado (diferencias de cambio desde la basal) entre
las escalas SUVR y Centiloid mediante las ecuaciones lineales de cada trazador.

Al trabajar con diferencias, los interceptos de las ecuaciones se cancelan y solo
interviene la pendiente. Los errores estándar se escalan por |pendiente|.
"""
import logging
from typing import Dict, Iterable, List, Tuple

from errors import UnknownTracer
from models import Dataset, SurrogateScale, Tracer, TrialContrast

logger = logging.getLogger(__name__)

# Centiloid por unidad de SUVR.
TRACER_SLOPES: Dict[Tracer, float] = {
    Tracer.FLORBETAPIR: 183.0,
    Tracer.FLORBETABEN: 153.4,
    Tracer.FLUTEMETAMOL: 116.0,
}


def effective_slope(tracers: Iterable[Tracer]) -> float:
    """
    Pendiente efectiva para un conjunto de trazadores: media aritmética de sus pendientes.

    Raises:
        UnknownTracer: Si el conjunto está vacío o contiene un trazador sin ecuación publicada.
    """
    tracer_set = {Tracer(t) for t in tracers}
    if not tracer_set or any(t not in TRACER_SLOPES for t in tracer_set):
        raise UnknownTracer()
    slopes = [TRACER_SLOPES[t] for t in sorted(tracer_set, key=lambda t: t.value)]
    return sum(slopes) / len(slopes)


def centiloid_delta_from_suvr(tracers: Iterable[Tracer], d_suvr: float, se_suvr: float) -> Tuple[float, float]:
    slope = effective_slope(tracers)
    return slope * d_suvr, abs(slope) * se_suvr


def suvr_delta_from_centiloid(tracers: Iterable[Tracer], d_cl: float, se_cl: float) -> Tuple[float, float]:
    slope = effective_slope(tracers)
    return d_cl / slope, se_cl / abs(slope)


def _convert(c: TrialContrast, target: SurrogateScale) -> TrialContrast:
    if target == SurrogateScale.SUVR:
        y1, se1 = suvr_delta_from_centiloid(c.tracers, c.y1, c.se1)
    else:
        y1, se1 = centiloid_delta_from_suvr(c.tracers, c.y1, c.se1)
    return c.model_copy(update={"y1": y1, "se1": se1, "surrogate_scale": target, "imputed_scale": True})


def _blocked(c: TrialContrast) -> bool:
    return not c.tracers or any(t not in TRACER_SLOPES for t in c.tracers)


def harmonize_surrogate_scale(d: Dataset, target: SurrogateScale) -> Dataset:
    """
    Lleva todos los contrastes a la escala `target`.

    Las filas convertidas quedan marcadas con `imputed_scale=True`; las que ya
    estaban en la escala destino no se tocan, de modo que la operación es idempotente.
    El dataset de entrada no se modifica.

    Raises:
        UnknownTracer: Con la lista de estudios cuyas filas no se pueden convertir.
    """
    target = SurrogateScale(target)
    pending = [c for c in d.contrasts if c.surrogate_scale != target]
    blocked = [c.study_id for c in pending if _blocked(c)]
    if blocked:
        raise UnknownTracer(blocked)

    converted: List[TrialContrast] = [
        _convert(c, target) if c.surrogate_scale != target else c for c in d.contrasts
    ]
    if pending:
        estudios = sorted({c.study_id for c in pending})
        logger.warning(f"Escala del subrogado imputada a {target.value} en {len(pending)} contrastes "
                       f"({len(estudios)} estudios: {', '.join(estudios)})")
    else:
        logger.info(f"Todos los contrastes ya están en la escala {target.value}")
    return d.model_copy(update={"contrasts": tuple(converted)})

