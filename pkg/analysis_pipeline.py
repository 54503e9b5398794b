# analysis_pipeline.py
"""
Orquestación de una ejecución completa, compartida por la CLI y el servidor MCP:
carga -> filtros (resultado, tiempos, imputados) -> armonización de escala ->
validación -> bloques de estudio -> ajuste / validación cruzada -> informes.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from config import RunConfig
from crossval import loo_metrics, loo_predict
from data_model import (
    blocks_for_treatment, build_study_blocks, drop_imputed, load_dataset, select_outcome,
    select_timepoints, validate_dataset, write_dataset,
)
from errors import ConfigError, DatasetInvalid, UnknownTreatment
from mcmc import dump_draws
from models import Dataset, PredictionRecord, SbcReport, SurrogateScale, ValidationFinding, ValidationReport
from report import AnalysisResults, emit_plot_data, emit_report, write_rows
from scale_convert import harmonize_surrogate_scale
from simgen import sbc_run, simulate_dataset
from surrogacy import (
    MIN_CONTRASTS, HierarchicalPosterior, evaluate_criteria, fit_model, fit_subgroup, width_reduction,
)
from utils import escribir_json

logger = logging.getLogger(__name__)


def prepare_dataset(cfg: RunConfig) -> Tuple[Dataset, ValidationReport]:
    """
    Carga el CSV de entrada y aplica los filtros de análisis de la configuración.

    Raises:
        ConfigError: Si no hay fichero de entrada.
        DataError: Errores de lectura o de conversión de escala.
    """
    if cfg.input is None:
        raise ConfigError("Falta el fichero de entrada (--input)")
    dataset = load_dataset(cfg.input)
    if cfg.outcome is not None:
        dataset = select_outcome(dataset, cfg.outcome)
    dropped: List[ValidationFinding] = []
    dataset = select_timepoints(dataset, cfg.timepoints, dropped)
    dataset = harmonize_surrogate_scale(dataset, cfg.scale)
    if cfg.exclude_imputed:
        dataset = drop_imputed(dataset)
    report = validate_dataset(dataset)
    return dataset, report.model_copy(update={"findings": tuple(dropped) + report.findings})


def _blocks(cfg: RunConfig, dataset: Dataset, report: ValidationReport):
    if not report.ok:
        raise DatasetInvalid(report.errors)
    for w in report.warnings:
        logger.warning(f"Aviso de validación [{w.code}]: {w.message}")
    return build_study_blocks(dataset, cfg.correlation.default_rho, cfg.correlation.shared_control_rho,
                              cfg.correlation.repair_psd)


def run_fit(cfg: RunConfig) -> AnalysisResults:
    """
    Ajusta el modelo configurado y calcula veredictos.

    Para los modelos jerárquicos también se ajustan los subgrupos de los tratamientos
    con al menos 3 contrastes y se calcula la reducción de anchura de los CrI.
    """
    dataset, validation = prepare_dataset(cfg)
    blocks = _blocks(cfg, dataset, validation)
    posterior = fit_model(blocks, cfg.model, cfg.priors, cfg.mcmc, cfg.treatment, cfg.covariate)
    results = AnalysisResults(config=cfg, dataset=dataset, posterior=posterior,
                              findings=list(validation.warnings),
                              psd_repaired=[b.study_id for b in blocks if b.psd_repaired])

    if isinstance(posterior, HierarchicalPosterior):
        results.treatment_verdicts = {t: evaluate_criteria(posterior, cfg.psi2_threshold, t)
                                      for t in posterior.treatments}
        counts = {t: sum(c.treatment == t for c in dataset.contrasts) for t in posterior.treatments}
        eligible = [t for t in posterior.treatments if counts[t] >= MIN_CONTRASTS]
        for t in eligible:
            results.subgroups[t] = fit_subgroup(blocks, t, cfg.priors, cfg.mcmc, cfg.covariate)
            results.subgroup_verdicts[t] = evaluate_criteria(results.subgroups[t], cfg.psi2_threshold)
        if eligible:
            results.width = width_reduction(results.subgroups, posterior.subset(eligible))
        else:
            logger.warning("Ningún tratamiento tiene 3 contrastes: no se calcula la reducción de anchura")
    else:
        results.verdict = evaluate_criteria(posterior, cfg.psi2_threshold)
        if cfg.model == "subgroup":
            results.treatment_verdicts = {cfg.treatment: results.verdict}
        logger.info(f"Veredicto de subrogación: {results.verdict.label}")

    if cfg.dump_draws:
        dump_draws(posterior.chains, Path(cfg.output_dir) / "draws")
    return results


def run_loo(cfg: RunConfig) -> AnalysisResults:
    """Validación cruzada dejando fuera un estudio con el modelo configurado."""
    dataset, validation = prepare_dataset(cfg)
    blocks = _blocks(cfg, dataset, validation)
    kind = cfg.model
    if kind == "subgroup":
        # Subgrupo = modelo agrupado sobre los contrastes del tratamiento.
        blocks = blocks_for_treatment(blocks, cfg.treatment or "")
        if not blocks:
            raise UnknownTreatment(cfg.treatment or "")
        kind = "pooled"
    records = loo_predict(blocks, kind, cfg.priors, cfg.mcmc, cfg.covariate)
    metrics = loo_metrics(records)
    logger.info(f"Validación cruzada: cobertura {metrics.coverage:.0%}, MAD {metrics.mad:.3f}, "
                f"razón de anchuras {metrics.width_ratio:.2f}")
    return AnalysisResults(config=cfg, dataset=dataset, loo_records=records, loo_metrics=metrics,
                           findings=list(validation.warnings),
                           psd_repaired=[b.study_id for b in blocks if b.psd_repaired])


def write_outputs(results: AnalysisResults) -> Dict[str, Path]:
    """Emite report.json, summaries.csv, los datos de los gráficos y, si hay, loo_records.csv."""
    out = Path(results.config.output_dir)
    paths = emit_report(results, out)
    paths.update(emit_plot_data(results, results.dataset, out))
    if results.loo_records:
        paths["loo_records.csv"] = write_rows(results.loo_records, out / "loo_records.csv", PredictionRecord)
    return paths


def validate_file(path: Union[str, Path]) -> ValidationReport:
    return validate_dataset(load_dataset(path))


def convert_file(input_path: Union[str, Path], output_path: Union[str, Path],
                 target: SurrogateScale) -> Dataset:
    dataset = harmonize_surrogate_scale(load_dataset(input_path), target)
    write_dataset(dataset, output_path)
    return dataset


def run_simulate(cfg: RunConfig, output_path: Union[str, Path]) -> Dataset:
    dataset = simulate_dataset(cfg.simulation.model_copy(update={"seed": cfg.mcmc.seed}))
    write_dataset(dataset, output_path)
    return dataset


def run_sbc(cfg: RunConfig, reps: Optional[int] = None) -> Tuple[SbcReport, Path]:
    if cfg.model == "subgroup":
        raise ConfigError("El SBC admite los modelos pooled, full y partial")
    sbc = sbc_run(cfg.simulation, cfg.priors, reps or cfg.sbc_reps, cfg.model, cfg.mcmc)
    path = escribir_json(Path(cfg.output_dir) / "sbc_report.json", {
        "config": cfg.model_dump(mode="json", exclude={"mcmc": {"workers"}}),
        "sbc": sbc,
    })
    return sbc, path


def summary_lines(results: AnalysisResults) -> List[str]:
    """Líneas breves para la salida estándar de la CLI."""
    lines = []
    p = results.posterior
    if p is not None:
        for name in p.parameter_names:
            if name.startswith("delta1["):
                continue
            s = p.summaries[name]
            lines.append(f"{name:<28} {s.mean:>10.4f} ({s.q2_5:.4f}, {s.q97_5:.4f})")
    if results.verdict:
        lines.append(f"veredicto: {results.verdict.label}")
    if isinstance(p, HierarchicalPosterior):
        lines += [f"veredicto[{t}]: {v.label}" for t, v in results.treatment_verdicts.items()]
    if results.width:
        lines.append(f"reducción media de anchura: pendiente {results.width.average['lambda1']:.0%}, "
                     f"psi2 {results.width.average['psi2']:.0%}")
    if results.loo_metrics:
        m = results.loo_metrics
        lines.append(f"LOO: cobertura {m.coverage:.2f}, mad {m.mad:.4f}, width_ratio {m.width_ratio:.3f}")
    return lines
