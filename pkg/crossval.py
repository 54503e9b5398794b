# crossval.py
"""
Validación cruzada dejando fuera un estudio: se reajusta el modelo sin los
resultados finales del estudio i (conservando su efecto sobre el subrogado) y se
predice el efecto clínico de cada uno de sus contrastes.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Sequence

import numpy as np

from config import McmcSettings, PriorConfig
from data_model import StudyBlock
from errors import EmptyRecords, InsufficientData
from models import LooMetrics, PredictionRecord
from surrogacy import HierarchicalPosterior, SurrogacyPosterior, fit_model

logger = logging.getLogger(__name__)

MIN_STUDIES = 4
Z_95 = 1.96
LOO_KINDS = ("pooled", "full", "partial")


def _predict_held_out(p: SurrogacyPosterior, block: StudyBlock, seed: int) -> List[PredictionRecord]:
    rng = np.random.default_rng(seed)
    hierarchical = isinstance(p, HierarchicalPosterior)
    positions = dict(zip(p.design.contrast_keys, p.design.positions))
    records = []
    for c in block.contrasts:
        lam0, lam1, lam2, psi = p.relationship_draws(c.treatment if hierarchical else None)
        delta1 = p.draws(f"delta1[{c.key}]")
        s, k = positions[c.key]
        delta2 = lam0 + lam1 * delta1 + lam2 * p.design.x[s, k] + psi * rng.standard_normal(delta1.size)
        y2_pred = delta2 + c.se2 * rng.standard_normal(delta1.size)
        lo, hi = np.quantile(y2_pred, [0.025, 0.975])
        records.append(PredictionRecord(
            study_id=c.study_id,
            contrast_id=c.contrast_id,
            observed=c.y2,
            obs_lo=c.y2 - Z_95 * c.se2,
            obs_hi=c.y2 + Z_95 * c.se2,
            pred=float(y2_pred.mean()),
            pred_lo=float(lo),
            pred_hi=float(hi),
            covered=bool(lo <= c.y2 <= hi),
        ))
    return records


def loo_predict(blocks: Sequence[StudyBlock], model_kind: str, priors: PriorConfig, s: McmcSettings,
                covariate: str = "none") -> List[PredictionRecord]:
    """
    Predicciones dejando fuera cada estudio.

    El reajuste del estudio i usa la semilla `s.seed + i`; los N reajustes se
    reparten entre `s.workers` hilos sin afectar al resultado. Un estudio multibrazo
    oculta todos sus y2 a la vez y produce un registro por contraste.

    Raises:
        InsufficientData: Con menos de 4 estudios, o si algún reajuste queda con
            menos de 3 contrastes con resultado final.
    """
    if model_kind not in LOO_KINDS:
        raise ValueError(f"Modelo no admitido en validación cruzada: {model_kind}")
    if len(blocks) < MIN_STUDIES:
        raise InsufficientData(len(blocks), MIN_STUDIES, "estudios")

    inner = s.model_copy(update={"workers": 1})

    def run(i: int) -> List[PredictionRecord]:
        held = [b.hold_out_outcome() if j == i else b for j, b in enumerate(blocks)]
        fold_settings = inner.model_copy(update={"seed": s.seed + i})
        logger.info(f"Validación cruzada: estudio {i + 1}/{len(blocks)} ('{blocks[i].study_id}') fuera")
        posterior = fit_model(held, model_kind, priors, fold_settings, covariate=covariate)
        return _predict_held_out(posterior, blocks[i], s.seed + i)

    if s.workers > 1:
        with ThreadPoolExecutor(max_workers=s.workers) as pool:
            per_study = list(pool.map(run, range(len(blocks))))
    else:
        per_study = [run(i) for i in range(len(blocks))]
    records = [r for group in per_study for r in group]
    logger.info(f"Validación cruzada completada: {len(records)} predicciones")
    return records


def loo_metrics(records: Sequence[PredictionRecord]) -> LooMetrics:
    """Cobertura, diferencia absoluta media y razón media de anchuras (predicha / observada)."""
    if not records:
        raise EmptyRecords()
    observed = np.array([r.observed for r in records])
    pred = np.array([r.pred for r in records])
    pred_width = np.array([r.pred_hi - r.pred_lo for r in records])
    obs_width = np.array([r.obs_hi - r.obs_lo for r in records])
    return LooMetrics(
        coverage=float(np.mean([r.covered for r in records])),
        mad=float(np.mean(np.abs(observed - pred))),
        width_ratio=float(np.mean(pred_width / obs_width)),
        n_records=len(records),
    )

