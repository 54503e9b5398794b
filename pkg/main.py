# main.py
"""
Interfaz de línea de órdenes.

Subórdenes: validate, convert, fit, loo, simulate, sbc, report.
Códigos de salida: 0 éxito; 1 error de datos, de configuración o de uso;
2 error del muestreador o error interno inesperado.
"""
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import click

import analysis_pipeline
from config import TimepointPolicy, load_run_config, settings
from errors import DataError, SamplerError
from models import Outcome, SurrogateScale
from report import render_report
from utils import configurar_logging_aplicacion, convert_to_json_serializable

logger = logging.getLogger(__name__)

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]


def _set(tree: Dict[str, Any], path: str, value: Any) -> None:
    if value is None:
        return
    node = tree
    *parents, leaf = path.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def run_options(func):
    """Opciones comunes de las órdenes que ajustan modelos (fit, loo, sbc)."""
    options = [
        click.option("--config", "config_path", type=click.Path(path_type=Path), help="Fichero YAML de configuración."),
        click.option("--input", "input_path", type=click.Path(path_type=Path), help="CSV de contrastes."),
        click.option("--output-dir", type=click.Path(path_type=Path)),
        click.option("--model", type=click.Choice(["pooled", "subgroup", "full", "partial"])),
        click.option("--treatment", help="Tratamiento para --model subgroup."),
        click.option("--outcome", type=click.Choice([o.value for o in Outcome])),
        click.option("--scale", type=click.Choice([s.value for s in SurrogateScale])),
        click.option("--timepoints", type=click.Choice([t.value for t in TimepointPolicy])),
        click.option("--iterations", type=int),
        click.option("--burnin", type=int),
        click.option("--thin", type=int),
        click.option("--chains", type=int),
        click.option("--seed", type=int),
        click.option("--workers", type=int, help="Hilos para cadenas y reajustes (no cambia los resultados)."),
        click.option("--psi-prior", type=click.Choice(["uniform", "halfnormal", "gamma-precision", "fixed"])),
        click.option("--psi-fixed", type=float, help="Valor de psi con --psi-prior fixed."),
        click.option("--default-rho", type=float),
        click.option("--shared-control-rho", type=float),
        click.option("--covariate", type=click.Choice(["none", "aria", "apoe"])),
        click.option("--psi2-threshold", type=float),
        click.option("--exclude-imputed/--include-imputed", default=None,
                     help="Excluye los contrastes con escala del subrogado imputada."),
        click.option("--dump-draws", is_flag=True, default=None, help="Vuelca las extracciones de cada cadena."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _load_config(opts: Dict[str, Any]):
    overrides: Dict[str, Any] = {}
    mapping = {
        "input_path": "input", "output_dir": "output_dir", "model": "model", "treatment": "treatment",
        "outcome": "outcome", "scale": "scale", "timepoints": "timepoints", "covariate": "covariate",
        "psi2_threshold": "psi2_threshold", "exclude_imputed": "exclude_imputed", "dump_draws": "dump_draws",
        "iterations": "mcmc.iterations", "burnin": "mcmc.burn_in", "thin": "mcmc.thin",
        "chains": "mcmc.chains", "seed": "mcmc.seed", "workers": "mcmc.workers",
        "psi_prior": "priors.psi_prior", "psi_fixed": "priors.psi_fixed",
        "default_rho": "correlation.default_rho", "shared_control_rho": "correlation.shared_control_rho",
    }
    for option, path in mapping.items():
        value = opts.get(option)
        _set(overrides, path, str(value) if isinstance(value, Path) else value)
    return load_run_config(opts.get("config_path"), overrides)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--log-level", type=click.Choice(LOG_LEVELS, case_sensitive=False), default=None)
@click.option("--log-file", type=click.Path(path_type=Path), default=None)
@click.option("--sampler-log-level", type=click.Choice(LOG_LEVELS, case_sensitive=False), default=None,
              help="Nivel de los módulos de muestreo (por defecto, el general).")
def cli(log_level: Optional[str], log_file: Optional[Path], sampler_log_level: Optional[str]):
    """Evaluación bayesiana de subrogados a nivel de ensayo."""
    ajustes = settings.logging
    if sampler_log_level:
        ajustes = ajustes.model_copy(update={"sampler_level": logging.getLevelName(sampler_log_level.upper())})
    level = logging.getLevelName(log_level.upper()) if log_level else None
    configurar_logging_aplicacion(ajustes, level, log_file)


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(path_type=Path))
@click.option("--json", "as_json", is_flag=True, help="Imprime los hallazgos en JSON.")
def validate(input_path: Path, as_json: bool) -> int:
    """Valida un CSV de contrastes (errores bloqueantes y avisos)."""
    report = analysis_pipeline.validate_file(input_path)
    if as_json:
        click.echo(json.dumps(convert_to_json_serializable(report), indent=2, ensure_ascii=False))
    else:
        for f in report.findings:
            where = f" [{f.study_id}/{f.contrast_id}]" if f.study_id else ""
            click.echo(f"{f.severity.value.upper()} {f.code}{where}: {f.message}")
        click.echo(f"{len(report.errors)} errores, {len(report.warnings)} avisos")
    return 0 if report.ok else 1


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(path_type=Path))
@click.option("--output", "output_path", required=True, type=click.Path(path_type=Path))
@click.option("--target", required=True, type=click.Choice([s.value for s in SurrogateScale]))
def convert(input_path: Path, output_path: Path, target: str) -> int:
    """Armoniza la escala del subrogado y marca las filas imputadas."""
    dataset = analysis_pipeline.convert_file(input_path, output_path, SurrogateScale(target))
    imputed = sum(c.imputed_scale for c in dataset.contrasts)
    click.echo(f"{len(dataset)} contrastes escritos en {output_path} ({imputed} con escala imputada)")
    return 0


@cli.command()
@run_options
def fit(**opts) -> int:
    """Ajusta el modelo de subrogación y emite el informe y los datos de los gráficos."""
    cfg = _load_config(opts)
    results = analysis_pipeline.run_fit(cfg)
    paths = analysis_pipeline.write_outputs(results)
    for line in analysis_pipeline.summary_lines(results):
        click.echo(line)
    click.echo(f"Informe: {paths['report.json']}")
    return 0


@cli.command()
@run_options
def loo(**opts) -> int:
    """Validación cruzada dejando fuera un estudio."""
    cfg = _load_config(opts)
    results = analysis_pipeline.run_loo(cfg)
    paths = analysis_pipeline.write_outputs(results)
    for line in analysis_pipeline.summary_lines(results):
        click.echo(line)
    click.echo(f"Registros: {paths['loo_records.csv']}")
    return 0


@cli.command()
@click.option("--config", "config_path", type=click.Path(path_type=Path), help="YAML con la sección 'simulation'.")
@click.option("--output", "output_path", required=True, type=click.Path(path_type=Path))
@click.option("--seed", type=int)
def simulate(config_path: Optional[Path], output_path: Path, seed: Optional[int]) -> int:
    """Genera un dataset sintético en el esquema CSV de entrada."""
    cfg = _load_config({"config_path": config_path, "seed": seed})
    dataset = analysis_pipeline.run_simulate(cfg, output_path)
    click.echo(f"{len(dataset)} contrastes simulados en {output_path}")
    return 0


@cli.command()
@run_options
@click.option("--reps", type=int, help="Número de réplicas (por defecto, sbc_reps de la configuración).")
def sbc(reps: Optional[int], **opts) -> int:
    """Calibración basada en simulación con priors emparejados."""
    cfg = _load_config(opts)
    report, path = analysis_pipeline.run_sbc(cfg, reps)
    for name, p in report.parameters.items():
        test = f", p = {p.p_value:.3f}" if p.p_value is not None else ""
        click.echo(f"{name:<24} cobertura {p.coverage:.2f}{test}")
    click.echo(f"Informe: {path}")
    return 0


@cli.command()
@click.option("--report", "report_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--output-dir", type=click.Path(path_type=Path))
def report(report_path: Path, output_dir: Optional[Path]) -> int:
    """Regenera summaries.csv desde un report.json e imprime la tabla de parámetros."""
    rows = render_report(report_path, output_dir)
    for r in rows:
        if r.scope == "study_effect":
            continue
        click.echo(f"{r.scope:<24} {r.parameter:<12} {r.mean:>10.4f} ({r.q2_5:.4f}, {r.q97_5:.4f})")
    return 0


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Ejecuta la CLI y devuelve el código de salida (sin llamar a sys.exit)."""
    args = list(argv) if argv is not None else sys.argv[1:]
    try:
        rv = cli.main(args=args, prog_name="surrogacy", standalone_mode=False)
        return rv if isinstance(rv, int) else 0
    except click.UsageError as e:
        click.echo(f"Error: {e.format_message()}", err=True)
        ctx = e.ctx
        click.echo(ctx.get_usage() if ctx else cli.get_usage(click.Context(cli, info_name="surrogacy")), err=True)
        return 1
    except click.ClickException as e:
        click.echo(f"Error: {e.format_message()}", err=True)
        return 1
    except click.exceptions.Abort:
        return 1
    except DataError as e:
        logger.error(f"Error de datos: {e}")
        click.echo(f"Error: {e}", err=True)
        return 1
    except SamplerError as e:
        logger.exception(f"Error del muestreador: {e}")
        click.echo(f"Error del muestreador: {e}", err=True)
        return 2
    except Exception as e:
        logger.exception(f"Error inesperado: {e}")
        click.echo(f"Error interno: {e}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(dispatch())
