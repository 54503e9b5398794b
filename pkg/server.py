# server.py
"""
Servidor MCP que expone las operaciones de análisis como herramientas para agentes de IA.

Las herramientas devuelven siempre texto JSON; los errores de datos o de configuración
se devuelven como {"error": ...} en lugar de propagarse al cliente.
"""
import json
import logging
from typing import Any, Dict, Optional

from mcp.server.fastmcp import FastMCP

import analysis_pipeline
from config import load_run_config, settings
from errors import SurrogacyError
from models import SurrogateScale
from report import build_report
from utils import configurar_logging_aplicacion, convert_to_json_serializable

logger = logging.getLogger(__name__)


def _dumps(payload: Any) -> str:
    return json.dumps(convert_to_json_serializable(payload), indent=2, ensure_ascii=False)


def _run_overrides(input_path: str, output_dir: Optional[str], model: str, treatment: Optional[str],
                   iterations: Optional[int], burn_in: Optional[int], thin: Optional[int],
                   seed: Optional[int], covariate: str) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {"input": input_path, "model": model, "covariate": covariate}
    if output_dir:
        overrides["output_dir"] = output_dir
    if treatment:
        overrides["treatment"] = treatment
    mcmc = {k: v for k, v in (("iterations", iterations), ("burn_in", burn_in), ("thin", thin), ("seed", seed))
            if v is not None}
    if mcmc:
        overrides["mcmc"] = mcmc
    return overrides


def surrogacy_tools(mcp: FastMCP) -> None:
    """Registra las herramientas de subrogación en el servidor MCP."""

    @mcp.tool()
    def validate_dataset_file(input_path: str) -> str:
        """
        Valida un CSV de contrastes activo frente a placebo.

        :param input_path: Ruta al CSV (una fila por contraste).
        :return: JSON con `ok`, la lista de errores bloqueantes y la de avisos.
        """
        try:
            report = analysis_pipeline.validate_file(input_path)
        except SurrogacyError as e:
            return _dumps({"error": str(e)})
        return _dumps({"ok": report.ok, "errors": report.errors, "warnings": report.warnings})

    @mcp.tool()
    def convert_dataset_file(input_path: str, output_path: str, target: str = "SUVR") -> str:
        """
        Convierte los efectos sobre el subrogado a una escala común (SUVR o Centiloid).

        :param input_path: CSV de entrada.
        :param output_path: CSV de salida; las filas convertidas quedan con imputed_scale = true.
        :param target: "SUVR" o "Centiloid".
        """
        try:
            dataset = analysis_pipeline.convert_file(input_path, output_path, SurrogateScale(target))
        except (SurrogacyError, ValueError) as e:
            return _dumps({"error": str(e)})
        return _dumps({
            "output_path": output_path,
            "n_contrasts": len(dataset),
            "imputed": [c.key for c in dataset.contrasts if c.imputed_scale],
        })

    @mcp.tool()
    def fit_surrogacy(input_path: str, model: str = "pooled", treatment: Optional[str] = None,
                      output_dir: Optional[str] = None, iterations: Optional[int] = None,
                      burn_in: Optional[int] = None, thin: Optional[int] = None, seed: Optional[int] = None,
                      covariate: str = "none") -> str:
        """
        Ajusta el modelo de subrogación a nivel de ensayo y devuelve el informe.

        Utiliza esta herramienta para saber si el efecto sobre el amiloide predice el
        efecto clínico: el informe incluye lambda0, lambda1, psi2 y el veredicto.

        :param input_path: CSV de contrastes.
        :param model: "pooled", "subgroup", "full" o "partial".
        :param treatment: Tratamiento, obligatorio con model = "subgroup".
        :param output_dir: Si se indica, también se escriben report.json y los CSV.
        :return: El contenido de report.json.
        """
        try:
            cfg = load_run_config(None, _run_overrides(input_path, output_dir, model, treatment,
                                                      iterations, burn_in, thin, seed, covariate))
            results = analysis_pipeline.run_fit(cfg)
            if output_dir:
                analysis_pipeline.write_outputs(results)
        except SurrogacyError as e:
            logger.error(f"fit_surrogacy falló: {e}")
            return _dumps({"error": str(e)})
        return _dumps(build_report(results))

    @mcp.tool()
    def loo_surrogacy(input_path: str, model: str = "pooled", treatment: Optional[str] = None,
                      output_dir: Optional[str] = None, iterations: Optional[int] = None,
                      burn_in: Optional[int] = None, thin: Optional[int] = None, seed: Optional[int] = None,
                      covariate: str = "none") -> str:
        """
        Validación cruzada dejando fuera un estudio: predice el efecto clínico de cada
        estudio a partir de su efecto sobre el subrogado.

        :return: JSON con las métricas (cobertura, mad, width_ratio) y los registros.
        """
        try:
            cfg = load_run_config(None, _run_overrides(input_path, output_dir, model, treatment,
                                                      iterations, burn_in, thin, seed, covariate))
            results = analysis_pipeline.run_loo(cfg)
            if output_dir:
                analysis_pipeline.write_outputs(results)
        except SurrogacyError as e:
            logger.error(f"loo_surrogacy falló: {e}")
            return _dumps({"error": str(e)})
        return _dumps({"metrics": results.loo_metrics, "records": results.loo_records})


mcp = FastMCP("surrogacy-tools")
surrogacy_tools(mcp)


if __name__ == "__main__":
    configurar_logging_aplicacion(settings.logging)
    mcp.run()
