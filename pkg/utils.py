# utils.py
import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from config import LoggingSettings

logger = logging.getLogger(__name__)


# --- Funciones de Utilidad ---

# Módulos que registran cada ajuste MCMC.
SAMPLER_LOGGERS = ("mcmc", "surrogacy", "simgen", "crossval")


def configurar_logging_aplicacion(ajustes: LoggingSettings, level: Optional[int] = None,
                                  log_file_path: Optional[Union[str, Path]] = None) -> Optional[Path]:
    """
    Configura el logging de la CLI y del servidor MCP.

    La consola usa stderr para no mezclarse con la salida de la CLI. Los módulos de
    muestreo pueden llevar su propio nivel (`ajustes.sampler_level`) y las
    bibliotecas de `ajustes.quiet_loggers` quedan en WARNING salvo en DEBUG.

    Args:
        ajustes: Sección `logging` de la configuración.
        level: Nivel general; sustituye a `ajustes.level` (flag --log-level).
        log_file_path: Fichero de log; sustituye a `ajustes.file` (flag --log-file).

    Returns:
        La ruta del fichero de log efectivamente abierto, o None si solo hay consola.
    """
    level = ajustes.level if level is None else level
    ruta = Path(log_file_path) if log_file_path else ajustes.file
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if ruta is not None:
        try:
            ruta.parent.mkdir(parents=True, exist_ok=True)
            handlers.append(logging.FileHandler(ruta, encoding='utf-8'))
        except OSError as e:
            logger.warning(f"No se pudo abrir el log {ruta}: {e}. Logueando solo a consola.")
            ruta = None

    logging.basicConfig(level=level, format=ajustes.format, handlers=handlers, force=True)

    sampler_level = level if ajustes.sampler_level is None else ajustes.sampler_level
    for name in SAMPLER_LOGGERS:
        logging.getLogger(name).setLevel(sampler_level)
    for name in ajustes.quiet_loggers:
        logging.getLogger(name).setLevel(level if level <= logging.DEBUG else max(level, logging.WARNING))

    logger.debug(f"Logging configurado. Nivel: {logging.getLevelName(level)}, muestreo: "
                 f"{logging.getLevelName(sampler_level)}, archivo: {ruta or 'no configurado'}")
    return ruta


def escribir_json(ruta_archivo: Union[str, Path], contenido: Any) -> Path:
    """
    Serializa un objeto a JSON (indentado, orden de inserción) y lo escribe en disco.

    Crea el directorio de destino si no existe. Los tipos de NumPy y los valores
    no finitos se convierten antes con `convert_to_json_serializable`.

    Args:
        ruta_archivo: Ruta del fichero JSON.
        contenido: Objeto a serializar.

    Returns:
        La ruta escrita.
    """
    ruta = Path(ruta_archivo)
    ruta.parent.mkdir(parents=True, exist_ok=True)
    texto = json.dumps(convert_to_json_serializable(contenido), indent=2, ensure_ascii=False)
    ruta.write_text(texto + "\n", encoding="utf-8")
    logger.info(f"JSON escrito en: {ruta}")
    return ruta


def convert_to_json_serializable(item: Any) -> Any:
    """
    Convierte de forma recursiva un objeto a tipos nativos de Python compatibles con JSON.

    Maneja arrays y escalares de NumPy, modelos Pydantic, enumeraciones y rutas.
    NaN e infinitos se convierten a None.

    Args:
        item: El objeto a convertir.

    Returns:
        Una versión del objeto con tipos compatibles con JSON.
    """
    if hasattr(item, "model_dump"):
        return convert_to_json_serializable(item.model_dump(mode="json"))
    if isinstance(item, dict):
        return {str(k): convert_to_json_serializable(v) for k, v in item.items()}
    elif isinstance(item, (list, tuple)):
        return [convert_to_json_serializable(elem) for elem in item]
    elif isinstance(item, (set, frozenset)):
        return sorted(convert_to_json_serializable(elem) for elem in item)
    elif isinstance(item, np.ndarray):
        return convert_to_json_serializable(item.tolist())
    elif isinstance(item, np.bool_):
        return bool(item.item())
    elif isinstance(item, np.integer):
        return int(item.item())
    elif isinstance(item, np.floating):
        return convert_to_json_serializable(float(item.item()))
    elif isinstance(item, Enum):
        return item.value
    elif isinstance(item, bool):
        return item
    elif isinstance(item, float):
        if math.isnan(item) or math.isinf(item):
            return None
        return item
    elif isinstance(item, (str, int)) or item is None:
        return item
    elif isinstance(item, Path):
        return str(item)
    else:
        logger.debug(f"Tipo no reconocido {type(item)} encontrado durante la serialización JSON. Convirtiendo a string.")
        return str(item)
