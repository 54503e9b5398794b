# mcmc.py
"""
Núcleo MCMC genérico: pasos de Gibbs para las condicionales conjugadas, Metropolis
de paseo aleatorio adaptativo para el resto, gestión de cadenas y diagnósticos de
convergencia (ESS, R-hat dividido con normalización por rangos, autocorrelaciones).

El modelo se describe con el protocolo `PosteriorModel`; el estado de cada cadena es
un objeto mutable propiedad del modelo y nunca se comparte entre cadenas.
"""
import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Protocol, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats

from config import McmcSettings
from errors import DivergentChain, InitOutOfSupport, UnknownParameter
from models import DiagnosticsReport, ParameterDiagnostics, PosteriorSummary

logger = logging.getLogger(__name__)

TARGET_ACCEPTANCE = 0.44
MAX_LAG = 50


@dataclass
class MetropolisBlock:
    """
    Un parámetro escalar actualizado con paseo aleatorio.

    `log_target` evalúa la densidad condicional (sin normalizar) en el estado
    actual, en la escala natural del parámetro; el núcleo añade el jacobiano cuando
    la propuesta se hace en escala logarítmica. Un valor -inf equivale a fuera del soporte.
    """
    name: str
    get: Callable[[Any], float]
    set: Callable[[Any, float], None]
    log_target: Callable[[Any], float]
    transform: Literal["log", "identity"] = "log"
    initial_step: float = 0.5


class PosteriorModel(Protocol):
    parameter_names: Sequence[str]

    def gibbs_step(self, state: Any, rng: np.random.Generator) -> None:
        ...

    def metropolis_blocks(self) -> Sequence[MetropolisBlock]:
        ...

    def log_density(self, state: Any) -> float:
        ...

    def flatten(self, state: Any) -> np.ndarray:
        ...


@dataclass
class Chain:
    parameter_names: List[str]
    draws: np.ndarray  # (extracciones retenidas, parámetros)
    iterations: np.ndarray
    acceptance: Dict[str, float] = field(default_factory=dict)
    step_sizes: Dict[str, float] = field(default_factory=dict)
    chain_index: int = 0
    seed: int = 0

    def column(self, name: str) -> np.ndarray:
        try:
            return self.draws[:, self.parameter_names.index(name)]
        except ValueError:
            raise UnknownParameter(name) from None


@dataclass
class _BlockState:
    log_step: float
    accepted_window: int = 0
    accepted_after_burn_in: int = 0
    n_batches: int = 0


def _metropolis_update(block: MetropolisBlock, bs: _BlockState, state: Any, rng: np.random.Generator,
                       current_target: float, chain: int, iteration: int) -> bool:
    x = block.get(state)
    if block.transform == "log":
        u = math.log(x)
        u_new = u + math.exp(bs.log_step) * rng.standard_normal()
        x_new = math.exp(u_new)
        log_jacobian = u_new - u
    else:
        x_new = x + math.exp(bs.log_step) * rng.standard_normal()
        log_jacobian = 0.0

    block.set(state, x_new)
    proposed_target = block.log_target(state)
    if math.isnan(proposed_target) or proposed_target == math.inf:
        raise DivergentChain(chain, iteration, block.name)
    log_ratio = proposed_target - current_target + log_jacobian
    if proposed_target > -math.inf and math.log(rng.uniform()) < log_ratio:
        return True
    block.set(state, x)
    return False


def _run_single_chain(model: PosteriorModel, init: Any, s: McmcSettings, chain_index: int) -> Chain:
    seed = s.seed + chain_index
    rng = np.random.default_rng(seed)
    state = copy.deepcopy(init)
    if not math.isfinite(model.log_density(state)):
        raise InitOutOfSupport(chain_index)

    blocks = list(model.metropolis_blocks())
    block_states = [_BlockState(log_step=math.log(b.initial_step)) for b in blocks]
    names = list(model.parameter_names)
    n_keep = s.retained_per_chain
    draws = np.empty((n_keep, len(names)))
    kept_iterations = np.empty(n_keep, dtype=np.int64)
    progress_every = max(1, s.iterations // 10)
    k = 0

    for it in range(s.iterations):
        model.gibbs_step(state, rng)
        for block, bs in zip(blocks, block_states):
            current = block.log_target(state)
            if not math.isfinite(current):
                raise DivergentChain(chain_index, it, block.name)
            if _metropolis_update(block, bs, state, rng, current, chain_index, it):
                bs.accepted_window += 1
                if it >= s.burn_in:
                    bs.accepted_after_burn_in += 1

        # Robbins-Monro sobre el log del paso; solo durante el burn-in.
        if it < s.burn_in and (it + 1) % s.adapt_window == 0:
            for bs in block_states:
                bs.n_batches += 1
                rate = bs.accepted_window / s.adapt_window
                bs.log_step += bs.n_batches ** -0.6 * (rate - TARGET_ACCEPTANCE)
                bs.accepted_window = 0
        elif it == s.burn_in - 1:
            for bs in block_states:
                bs.accepted_window = 0

        if it >= s.burn_in and (it - s.burn_in + 1) % s.thin == 0 and k < n_keep:
            row = model.flatten(state)
            if not np.all(np.isfinite(row)):
                raise DivergentChain(chain_index, it, "gibbs")
            draws[k] = row
            kept_iterations[k] = it + 1
            k += 1

        if (it + 1) % progress_every == 0:
            logger.debug(f"Cadena {chain_index}: iteración {it + 1}/{s.iterations}")

    post = s.iterations - s.burn_in
    acceptance = {b.name: bs.accepted_after_burn_in / post for b, bs in zip(blocks, block_states)}
    steps = {b.name: math.exp(bs.log_step) for b, bs in zip(blocks, block_states)}
    return Chain(parameter_names=names, draws=draws[:k], iterations=kept_iterations[:k],
                 acceptance=acceptance, step_sizes=steps, chain_index=chain_index, seed=seed)


def run_chains(model: PosteriorModel, inits: Sequence[Any], s: McmcSettings) -> List[Chain]:
    """
    Ejecuta `s.chains` cadenas independientes.

    La cadena i usa el generador `default_rng(seed + i)`, de modo que el resultado
    es idéntico con cualquier número de hilos (`s.workers`).

    Args:
        model: Especificación de la posterior.
        inits: Un estado inicial por cadena (se copian; no se modifican).
        s: Protocolo de muestreo.

    Raises:
        InitOutOfSupport: Si la log-densidad no es finita en algún estado inicial.
        DivergentChain: Si la log-densidad deja de ser finita durante el muestreo.
    """
    if len(inits) != s.chains:
        raise ValueError(f"Se esperaban {s.chains} estados iniciales, se recibieron {len(inits)}")
    logger.info(f"Muestreando {s.chains} cadenas: {s.iterations} iteraciones, burn-in {s.burn_in}, "
                f"thinning {s.thin} ({s.retained_per_chain} extracciones por cadena)")
    if s.workers > 1 and s.chains > 1:
        with ThreadPoolExecutor(max_workers=min(s.workers, s.chains)) as pool:
            chains = list(pool.map(lambda i: _run_single_chain(model, inits[i], s, i), range(s.chains)))
    else:
        chains = [_run_single_chain(model, inits[i], s, i) for i in range(s.chains)]
    for ch in chains:
        if ch.acceptance:
            tasas = ", ".join(f"{k}={v:.2f}" for k, v in ch.acceptance.items())
            logger.info(f"Cadena {ch.chain_index}: tasas de aceptación {tasas}")
    return chains


# --- Acceso a las extracciones ---

def draws_for(chains: Sequence[Chain], name: str) -> np.ndarray:
    """Extracciones de un parámetro con forma (cadenas, extracciones)."""
    if not chains:
        raise ValueError("No hay cadenas")
    return np.stack([ch.column(name) for ch in chains])


def pooled_draws(chains: Sequence[Chain], name: str) -> np.ndarray:
    return draws_for(chains, name).reshape(-1)


# --- Diagnósticos ---

def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Autocovarianza sesgada de cada fila (cadena) vía FFT."""
    n = x.shape[-1]
    centered = x - x.mean(axis=-1, keepdims=True)
    nfft = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centered, n=nfft, axis=-1)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), n=nfft, axis=-1)[..., :n]
    return acov / n


def effective_sample_size(x: np.ndarray) -> float:
    """
    ESS multicadena con la secuencia inicial positiva (y monótona) de Geyer.

    Args:
        x: Extracciones con forma (cadenas, extracciones).

    Returns:
        ESS en (0, cadenas * extracciones].
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, n = x.shape
    acov = _autocovariance(x)
    chain_mean = x.mean(axis=1)
    mean_var = np.mean(acov[:, 0]) * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += np.var(chain_mean, ddof=1)

    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - np.mean(acov[:, 1])) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (mean_var - np.mean(acov[:, t + 1])) / var_plus
        rho_odd = 1.0 - (mean_var - np.mean(acov[:, t + 2])) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    # Secuencia inicial monótona.
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2

    total = m * n
    tau = -1.0 + 2.0 * np.sum(rho[:max_t + 1]) + np.sum(rho[max_t + 1:max_t + 2])
    tau = max(tau, 1.0 / np.log10(total))
    return float(min(total / tau, total))


def _split_chains(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.vstack([x[:, :half], x[:, -half:]])


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    size = x.size
    ranks = stats.rankdata(x, method="average").reshape(x.shape)
    return stats.norm.ppf((ranks - 3.0 / 8.0) / (size + 1.0 / 4.0))


def _rhat_classic(x: np.ndarray) -> float:
    _, n = x.shape
    between = n * np.var(x.mean(axis=1), ddof=1)
    within = np.mean(np.var(x, axis=1, ddof=1))
    var_hat = (n - 1) / n * within + between / n
    return float(np.sqrt(var_hat / within))


def split_rhat(x: np.ndarray) -> float:
    """R-hat dividido y normalizado por rangos: máximo de las versiones bulk y plegada."""
    split = _split_chains(np.atleast_2d(np.asarray(x, dtype=float)))
    bulk = _rhat_classic(_rank_normalize(split))
    folded = _rhat_classic(_rank_normalize(np.abs(split - np.median(split))))
    return max(bulk, folded)


def autocorrelation(x: np.ndarray, max_lag: int = MAX_LAG) -> List[float]:
    """Autocorrelaciones en los retardos 1..max_lag, promediadas entre cadenas."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    acov = _autocovariance(x)
    lags = min(max_lag, x.shape[1] - 1)
    acf = acov[:, 1:lags + 1] / acov[:, :1]
    return [float(v) for v in acf.mean(axis=0)]


def diagnostics(chains: Sequence[Chain]) -> DiagnosticsReport:
    """
    ESS, R-hat dividido (con 2 o más cadenas) y autocorrelaciones por parámetro.

    Un parámetro constante no se considera un fallo: queda marcado como degenerado.
    """
    if not chains:
        raise ValueError("No hay cadenas que diagnosticar")
    n_draws = min(ch.draws.shape[0] for ch in chains)
    if n_draws < 100:
        raise ValueError(f"Se necesitan al menos 100 extracciones por cadena (hay {n_draws})")

    params: Dict[str, ParameterDiagnostics] = {}
    for name in chains[0].parameter_names:
        x = np.stack([ch.column(name)[:n_draws] for ch in chains])
        if np.ptp(x) == 0.0:
            params[name] = ParameterDiagnostics(name=name, degenerate=True)
            continue
        params[name] = ParameterDiagnostics(
            name=name,
            ess=effective_sample_size(x),
            rhat=split_rhat(x) if len(chains) >= 2 else None,
            autocorrelation=autocorrelation(x),
        )
    degenerate = [n for n, p in params.items() if p.degenerate]
    if degenerate:
        logger.warning(f"Parámetros constantes en todas las extracciones: {', '.join(degenerate)}")
    acceptance = {k: [ch.acceptance.get(k, float("nan")) for ch in chains] for k in chains[0].acceptance}
    return DiagnosticsReport(n_chains=len(chains), draws_per_chain=n_draws, parameters=params,
                             acceptance=acceptance)


def summarize_draws(name: str, values: np.ndarray) -> PosteriorSummary:
    values = np.asarray(values, dtype=float).reshape(-1)
    q = np.quantile(values, [0.025, 0.5, 0.975])
    return PosteriorSummary(
        name=name,
        mean=float(values.mean()),
        sd=float(values.std(ddof=1)) if values.size > 1 else 0.0,
        q2_5=float(q[0]), q50=float(q[1]), q97_5=float(q[2]),
    )


def summarize(chains: Sequence[Chain], name: str,
              report: Optional[DiagnosticsReport] = None) -> PosteriorSummary:
    """
    Media, DE y cuantiles 2.5/50/97.5 (interpolación lineal) de las extracciones agrupadas.

    Raises:
        UnknownParameter: Si el parámetro no existe en las cadenas.
    """
    summary = summarize_draws(name, pooled_draws(chains, name))
    if report is not None and name in report.parameters:
        diag = report.parameters[name]
        summary = summary.model_copy(update={"ess": diag.ess, "rhat": diag.rhat})
    return summary


def dump_draws(chains: Sequence[Chain], directory: Union[str, Path], prefix: str = "draws") -> List[Path]:
    """Escribe un CSV por cadena con la columna `iteration` y una columna por parámetro."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for ch in chains:
        df = pd.DataFrame(ch.draws, columns=ch.parameter_names)
        df.insert(0, "iteration", ch.iterations)
        path = directory / f"{prefix}_chain{ch.chain_index}.csv"
        df.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
        paths.append(path)
    logger.info(f"Extracciones volcadas en {directory} ({len(paths)} ficheros)")
    return paths
