# report.py
"""
Emisión de resultados: report.json (configuración efectiva, resúmenes posteriores,
veredictos, reducción de anchura, diagnósticos y validación cruzada), summaries.csv
y los ficheros de datos para los gráficos (bosque, burbujas, banda de regresión y
bosque de la validación cruzada).

Cada CSV se re-lee con `read_rows` y el modelo Pydantic de su fila.
"""
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Type, TypeVar, Union

import pandas as pd
from pydantic import BaseModel

from config import RunConfig
from models import (
    BandRow, BubbleRow, Dataset, ForestRow, LooMetrics, PosteriorSummary, PredictionRecord,
    SummaryRow, SurrogacyVerdict, ValidationFinding, WidthReduction,
)
from surrogacy import HierarchicalPosterior, SurrogacyPosterior, band_grid, regression_band
from utils import escribir_json

logger = logging.getLogger(__name__)

RowModel = TypeVar("RowModel", bound=BaseModel)

REPORT_FILE = "report.json"
SUMMARIES_FILE = "summaries.csv"
HYPER_PARAMETERS = ("b0", "b1", "t0", "t1", "b_psi", "t_psi")
_TAGGED = re.compile(r"^(?P<base>\w+)\[(?P<tag>.+)\]$")


@dataclass
class AnalysisResults:
    """Todo lo que produce una ejecución de `fit` o `loo`."""
    config: RunConfig
    dataset: Dataset
    posterior: Optional[SurrogacyPosterior] = None
    verdict: Optional[SurrogacyVerdict] = None
    treatment_verdicts: Dict[str, SurrogacyVerdict] = field(default_factory=dict)
    subgroups: Dict[str, SurrogacyPosterior] = field(default_factory=dict)
    subgroup_verdicts: Dict[str, SurrogacyVerdict] = field(default_factory=dict)
    width: Optional[WidthReduction] = None
    loo_records: List[PredictionRecord] = field(default_factory=list)
    loo_metrics: Optional[LooMetrics] = None
    findings: List[ValidationFinding] = field(default_factory=list)
    psd_repaired: List[str] = field(default_factory=list)


# --- Ficheros CSV tipados ---

def write_rows(rows: Sequence[BaseModel], path: Union[str, Path], model: Type[BaseModel]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(model.model_fields)
    df = pd.DataFrame([r.model_dump(mode="json") for r in rows], columns=columns)
    df.to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Escrito {path.name} ({len(rows)} filas)")
    return path


def read_rows(path: Union[str, Path], model: Type[RowModel]) -> List[RowModel]:
    """Re-lee un CSV emitido validando cada fila con su modelo (celda vacía = None)."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    rows = []
    for record in df.to_dict(orient="records"):
        cleaned = {k: (None if v == "" else v) for k, v in record.items()}
        rows.append(model.model_validate(cleaned))
    return rows


# --- report.json ---

def _stats(s: PosteriorSummary) -> Dict[str, Any]:
    return s.model_dump(exclude={"name"})


def _treatment_counts(dataset: Dataset) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for c in dataset.contrasts:
        counts[c.treatment] = counts.get(c.treatment, 0) + 1
    return counts


def build_report(results: AnalysisResults) -> Dict[str, Any]:
    cfg = results.config
    d = results.dataset
    report: Dict[str, Any] = {
        # `workers` no afecta al resultado y se omite para que el informe sea reproducible.
        "config": cfg.model_dump(mode="json", exclude={"mcmc": {"workers"}}),
        "data": {
            "provenance": d.provenance,
            "n_studies": len(d.study_ids),
            "n_contrasts": len(d),
            "treatments": _treatment_counts(d),
            "imputed_contrasts": [c.key for c in d.contrasts if c.imputed_scale],
            "psd_repaired": list(results.psd_repaired),
            "warnings": [f.model_dump(mode="json") for f in results.findings],
        },
    }

    p = results.posterior
    if p is not None:
        report["model"] = {
            "kind": cfg.model,
            "scope": p.scope,
            "covariate": p.design.covariate,
            "covariate_center": p.design.covariate_center,
        }
        report["parameters"] = {n: _stats(s) for n, s in p.summaries.items() if not n.startswith("delta1[")}
        report["study_effects"] = {n[len("delta1["):-1]: _stats(s) for n, s in p.summaries.items()
                                   if n.startswith("delta1[")}
        weights = p.mixture_weights if isinstance(p, HierarchicalPosterior) else {}
        report["treatments"] = {
            t: {"verdict": v.model_dump(), "weight": weights.get(t)}
            for t, v in results.treatment_verdicts.items()
        }
        report["verdict"] = results.verdict.model_dump() if results.verdict else None
        report["diagnostics"] = {
            "n_chains": p.diagnostics.n_chains,
            "draws_per_chain": p.diagnostics.draws_per_chain,
            "acceptance": p.diagnostics.acceptance,
            "degenerate": p.diagnostics.degenerate,
        }
    if results.subgroups:
        report["subgroups"] = {
            t: {
                "parameters": {n: _stats(s) for n, s in sp.summaries.items() if not n.startswith("delta1[")},
                "verdict": results.subgroup_verdicts[t].model_dump() if t in results.subgroup_verdicts else None,
            }
            for t, sp in results.subgroups.items()
        }
    report["width_reduction"] = results.width.model_dump() if results.width else None
    if results.loo_metrics is not None:
        report["loo"] = {
            "metrics": results.loo_metrics.model_dump(),
            "held_out": "y2 del estudio oculto; su y1 se conserva e informa delta1",
        }
    return report


def _row(scope: str, parameter: str, stats: Dict[str, Any], weight: Optional[float] = None) -> SummaryRow:
    return SummaryRow(scope=scope, parameter=parameter, weight=weight, **stats)


def summary_rows(report: Dict[str, Any]) -> List[SummaryRow]:
    """Tabla plana de resúmenes reconstruida a partir de un report.json."""
    rows: List[SummaryRow] = []
    scope = report.get("model", {}).get("scope", "")
    treatments = report.get("treatments", {})
    for name, stats in report.get("parameters", {}).items():
        match = _TAGGED.match(name)
        if match:
            tag = match.group("tag")
            weight = treatments.get(tag, {}).get("weight")
            rows.append(_row(f"treatment:{tag}", match.group("base"), stats, weight))
        elif name in HYPER_PARAMETERS:
            rows.append(_row("hyper", name, stats))
        else:
            rows.append(_row(scope, name, stats))
    for key, stats in report.get("study_effects", {}).items():
        rows.append(_row("study_effect", f"delta1[{key}]", stats))
    for t, block in report.get("subgroups", {}).items():
        for name, stats in block["parameters"].items():
            rows.append(_row(f"subgroup:{t}", name, stats))
    return rows


def emit_report(results: AnalysisResults, output_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    Escribe report.json y summaries.csv en `output_dir`.

    Returns:
        Rutas escritas por nombre de fichero.
    """
    output_dir = Path(output_dir)
    report = build_report(results)
    paths = {REPORT_FILE: escribir_json(output_dir / REPORT_FILE, report)}
    paths[SUMMARIES_FILE] = write_rows(summary_rows(report), output_dir / SUMMARIES_FILE, SummaryRow)
    return paths


def render_report(report_path: Union[str, Path], output_dir: Optional[Union[str, Path]] = None) -> List[SummaryRow]:
    """Vuelve a generar summaries.csv a partir de un report.json existente."""
    report_path = Path(report_path)
    report = json.loads(report_path.read_text(encoding="utf-8"))
    rows = summary_rows(report)
    target = Path(output_dir) if output_dir else report_path.parent
    write_rows(rows, target / SUMMARIES_FILE, SummaryRow)
    return rows


# --- Datos para gráficos ---

def bubble_rows(dataset: Dataset) -> List[BubbleRow]:
    return [BubbleRow(study_id=c.study_id, contrast_id=c.contrast_id, y1=c.y1, y2=c.y2, n_final=c.n_final,
                      treatment=c.treatment, imputed=c.imputed_scale) for c in dataset.contrasts]


def forest_rows(dataset: Dataset, z: float = 1.96) -> List[ForestRow]:
    """Efectos por contraste con IC al 95%, agrupados por tratamiento (orden de aparición)."""
    order = {t: i for i, t in enumerate(dataset.treatments)}
    rows = []
    for c in sorted(dataset.contrasts, key=lambda c: order[c.treatment]):
        rows.append(ForestRow(treatment=c.treatment, study_id=c.study_id, contrast_id=c.contrast_id,
                              endpoint="surrogate", effect=c.y1, lo=c.y1 - z * c.se1, hi=c.y1 + z * c.se1,
                              imputed=c.imputed_scale))
        rows.append(ForestRow(treatment=c.treatment, study_id=c.study_id, contrast_id=c.contrast_id,
                              endpoint="final", effect=c.y2, lo=c.y2 - z * c.se2, hi=c.y2 + z * c.se2,
                              imputed=False))
    return rows


def loo_forest_rows(records: Sequence[PredictionRecord], dataset: Dataset) -> List[ForestRow]:
    """Resultado final observado frente al intervalo predictivo LOO, dos filas por contraste."""
    by_key = {c.key: c for c in dataset.contrasts}
    order = {t: i for i, t in enumerate(dataset.treatments)}
    rows = []
    for r in sorted(records, key=lambda r: order[by_key[f"{r.study_id}/{r.contrast_id}"].treatment]):
        c = by_key[f"{r.study_id}/{r.contrast_id}"]
        rows.append(ForestRow(treatment=c.treatment, study_id=r.study_id, contrast_id=r.contrast_id,
                              endpoint="observed", effect=r.observed, lo=r.obs_lo, hi=r.obs_hi,
                              imputed=c.imputed_scale))
        rows.append(ForestRow(treatment=c.treatment, study_id=r.study_id, contrast_id=r.contrast_id,
                              endpoint="predicted", effect=r.pred, lo=r.pred_lo, hi=r.pred_hi,
                              imputed=c.imputed_scale))
    return rows


def band_rows(p: SurrogacyPosterior, dataset: Dataset) -> List[BandRow]:
    grid = band_grid([c.y1 for c in dataset.contrasts])
    if isinstance(p, HierarchicalPosterior):
        return [row for t in p.treatments for row in regression_band(p, grid, t)]
    return regression_band(p, grid)


def emit_plot_data(results: AnalysisResults, dataset: Dataset, output_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    Escribe bubble.csv, forest.csv, band.csv (si hay ajuste) y loo_forest.csv
    (si hay validación cruzada).
    """
    output_dir = Path(output_dir)
    paths = {
        "bubble.csv": write_rows(bubble_rows(dataset), output_dir / "bubble.csv", BubbleRow),
        "forest.csv": write_rows(forest_rows(dataset), output_dir / "forest.csv", ForestRow),
    }
    if results.posterior is not None:
        paths["band.csv"] = write_rows(band_rows(results.posterior, dataset), output_dir / "band.csv", BandRow)
    if results.loo_records:
        paths["loo_forest.csv"] = write_rows(loo_forest_rows(results.loo_records, dataset),
                                            output_dir / "loo_forest.csv", ForestRow)
    return paths
