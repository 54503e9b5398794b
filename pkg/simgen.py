# simgen.py
"""
Generador de datasets sintéticos y calibración basada en simulación (SBC).

Los datasets simulados siguen exactamente el modelo que se ajusta, de modo que
sirven de oráculo para los ajustes agrupados, por subgrupo y jerárquicos.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import stats

from config import McmcSettings, PriorConfig, SimDesign
from data_model import build_study_blocks, within_study_covariance
from errors import InvalidDesign, SurrogacyError
from models import Dataset, SbcParameterResult, SbcReport, Tracer, TrialContrast
from surrogacy import PsiPrior, fit_model

logger = logging.getLogger(__name__)

MIN_SBC_REPS_FOR_TEST = 50
MAX_RANK_BINS = 20


def validate_design(d: SimDesign) -> None:
    """
    Comprueba los invariantes de un diseño de simulación.

    Raises:
        InvalidDesign: Con la descripción del primer problema encontrado.
    """
    if d.n_studies < 3:
        raise InvalidDesign(f"n_studies debe ser >= 3 (valor {d.n_studies})")
    if d.arms is not None:
        if len(d.arms) != d.n_studies:
            raise InvalidDesign(f"'arms' tiene {len(d.arms)} valores para {d.n_studies} estudios")
        if any(a < 2 or a > 6 for a in d.arms):
            raise InvalidDesign("cada estudio debe tener entre 2 y 6 brazos")
    else:
        if not d.arm_probabilities or any(a < 2 or a > 6 for a in d.arm_probabilities):
            raise InvalidDesign("arm_probabilities debe repartirse entre 2 y 6 brazos")
        if any(p < 0 for p in d.arm_probabilities.values()) or sum(d.arm_probabilities.values()) <= 0:
            raise InvalidDesign("arm_probabilities debe ser no negativa y sumar más de 0")
    if d.psi2 < 0 or any(v < 0 for v in d.psi2_by_treatment.values()):
        raise InvalidDesign("las varianzas condicionales deben ser >= 0")
    if d.delta1_sd < 0:
        raise InvalidDesign("delta1_sd debe ser >= 0")
    for name, (lo, hi) in (("se1_range", d.se1_range), ("se2_range", d.se2_range)):
        if lo <= 0 or hi < lo:
            raise InvalidDesign(f"{name} debe cumplir 0 < mínimo <= máximo")
    for name, value in (("rho_within", d.rho_within), ("shared_control_rho", d.shared_control_rho)):
        if not -1 < value < 1:
            raise InvalidDesign(f"{name} debe estar en (-1, 1)")
    if not d.treatments:
        raise InvalidDesign("se necesita al menos un tratamiento")
    unknown = (set(d.perturbations) | set(d.psi2_by_treatment)) - set(d.treatments)
    if unknown:
        raise InvalidDesign(f"perturbaciones para tratamientos no declarados: {', '.join(sorted(unknown))}")
    lo, hi = d.n_final_range
    if lo < 1 or hi < lo:
        raise InvalidDesign("n_final_range debe cumplir 1 <= mínimo <= máximo")
    try:
        tracers = [Tracer(t) for t in d.tracers]
    except ValueError as e:
        raise InvalidDesign(str(e)) from None
    if not tracers:
        raise InvalidDesign("se necesita al menos un trazador")


def _arms(d: SimDesign, rng: np.random.Generator) -> List[int]:
    if d.arms is not None:
        return list(d.arms)
    options = sorted(d.arm_probabilities)
    probs = np.array([d.arm_probabilities[a] for a in options], dtype=float)
    return [int(a) for a in rng.choice(options, size=d.n_studies, p=probs / probs.sum())]


def simulate_dataset(d: SimDesign) -> Dataset:
    """
    Simula un dataset de contrastes.

    El estudio s recibe el tratamiento `treatments[s % J]`; cada uno de sus
    (brazos - 1) contrastes comparte el placebo. Se extrae delta1, después
    delta2 = lambda0_j + lambda1_j·delta1 + Normal(0, psi_j) y, por último, los
    efectos observados con la covarianza intra-estudio. Determinista por semilla.

    Raises:
        InvalidDesign: Si el diseño no es válido.
    """
    validate_design(d)
    rng = np.random.default_rng(d.seed)
    arms = _arms(d, rng)
    tracers = frozenset(Tracer(t) for t in d.tracers)
    width = len(str(d.n_studies))
    contrasts: List[TrialContrast] = []

    for s, n_arms in enumerate(arms):
        treatment = d.treatments[s % len(d.treatments)]
        d_lambda0, d_lambda1 = d.perturbations.get(treatment, (0.0, 0.0))
        lambda0, lambda1 = d.lambda0 + d_lambda0, d.lambda1 + d_lambda1
        psi = math.sqrt(d.psi2_by_treatment.get(treatment, d.psi2))
        k = n_arms - 1
        delta1 = rng.normal(d.delta1_mean, d.delta1_sd, size=k)
        delta2 = lambda0 + lambda1 * delta1 + psi * rng.standard_normal(k)
        se1 = rng.uniform(*d.se1_range, size=k)
        se2 = rng.uniform(*d.se2_range, size=k)
        n_final = rng.integers(d.n_final_range[0], d.n_final_range[1] + 1, size=k)

        study_id = f"SIM{s + 1:0{width}d}"
        draft = [
            TrialContrast(
                study_id=study_id, treatment=treatment, contrast_id=f"C{i + 1}",
                y1=0.0, se1=float(se1[i]), surrogate_scale=d.surrogate_scale, tracers=tracers,
                t_surrogate=d.t_surrogate_weeks, y2=0.0, se2=float(se2[i]), outcome=d.outcome,
                t_final=d.t_final_weeks, n_final=int(n_final[i]),
                rho_within=d.rho_within if d.rho_within != 0 else None,
            )
            for i in range(k)
        ]
        sigma = within_study_covariance(draft, [d.rho_within] * k, d.shared_control_rho)
        mean = np.column_stack([delta1, delta2]).reshape(-1)
        observed = rng.multivariate_normal(mean, sigma, method="eigh")
        contrasts += [
            c.model_copy(update={"y1": float(observed[2 * i]), "y2": float(observed[2 * i + 1])})
            for i, c in enumerate(draft)
        ]

    logger.info(f"Dataset simulado: {d.n_studies} estudios, {len(contrasts)} contrastes (semilla {d.seed})")
    return Dataset(contrasts=tuple(contrasts), provenance=f"simgen:seed={d.seed}")


# --- Calibración basada en simulación ---

def _draw_truth(design: SimDesign, priors: PriorConfig, model_kind: str,
                rng: np.random.Generator) -> Tuple[SimDesign, Dict[str, float]]:
    """Extrae los parámetros verdaderos de los priors y devuelve el diseño correspondiente."""
    psi_prior = PsiPrior.from_config(priors)
    c = priors.coefficient_sd
    update = {"delta1_mean": priors.delta1_mean, "delta1_sd": priors.delta1_sd,
              "seed": int(rng.integers(2 ** 32))}
    truth: Dict[str, float] = {}

    if model_kind == "pooled":
        truth["lambda0"] = float(rng.normal(0.0, c))
        truth["lambda1"] = float(rng.normal(0.0, c))
        psi = psi_prior.sample(rng)
        if not psi_prior.is_fixed:
            truth["psi2"] = psi ** 2
        update.update(lambda0=truth["lambda0"], lambda1=truth["lambda1"], psi2=psi ** 2,
                      perturbations={}, psi2_by_treatment={})
        return design.model_copy(update=update), truth

    b = rng.normal(0.0, priors.hypermean_sd, size=2)
    t = np.abs(rng.normal(0.0, priors.hyper_sd_scale, size=2))
    truth.update(b0=float(b[0]), b1=float(b[1]), t0=float(t[0]), t1=float(t[1]))
    perturbations, psi2_by_treatment = {}, {}
    common_psi = priors.psi_structure == "common" or psi_prior.is_fixed
    if common_psi:
        psi = psi_prior.sample(rng)
        if not psi_prior.is_fixed:
            truth["psi2"] = psi ** 2
    else:
        b_psi = float(rng.normal(priors.log_psi_mean, priors.log_psi_mean_sd))
        t_psi = float(abs(rng.normal(0.0, priors.log_psi_sd_scale)))
        truth.update(b_psi=b_psi, t_psi=t_psi)
    for name in design.treatments:
        exchangeable = True
        if model_kind == "partial":
            weight = rng.uniform()
            exchangeable = rng.uniform() < weight
        if exchangeable:
            lam = rng.normal(b, t)
        else:
            lam = rng.normal(0.0, c, size=2)
        truth[f"lambda0[{name}]"], truth[f"lambda1[{name}]"] = float(lam[0]), float(lam[1])
        perturbations[name] = (float(lam[0]), float(lam[1]))
        if not common_psi:
            psi_j = math.exp(rng.normal(truth["b_psi"], truth["t_psi"]))
            truth[f"psi2[{name}]"] = psi_j ** 2
            psi2_by_treatment[name] = psi_j ** 2
        else:
            psi2_by_treatment[name] = psi ** 2
    update.update(lambda0=0.0, lambda1=0.0, perturbations=perturbations, psi2_by_treatment=psi2_by_treatment)
    return design.model_copy(update=update), truth


def rank_bins(n_draws: int) -> Tuple[int, int]:
    """
    Extracciones usadas para los rangos y número de bins del histograma.

    Los rangos toman valores 0..L con L extracciones; se recorta L para que L + 1
    sea múltiplo exacto del número de bins y todos los bins cubran los mismos rangos.
    """
    bins = min(MAX_RANK_BINS, n_draws + 1)
    return (n_draws + 1) // bins * bins - 1, bins


def _thin_evenly(draws: np.ndarray, used: int) -> np.ndarray:
    if used == draws.size:
        return draws
    return draws[np.linspace(0, draws.size - 1, used).round().astype(np.int64)]


def sbc_run(design: SimDesign, priors: PriorConfig, reps: int, model_kind: str,
            s: McmcSettings) -> SbcReport:
    """
    Calibración basada en simulación con priors emparejados.

    En cada réplica se extrae la verdad de los priors, se simula un dataset con la
    estructura de `design`, se ajusta el modelo y se registra el rango de la verdad
    entre las extracciones posteriores. El test chi-cuadrado de uniformidad de los
    rangos solo se calcula con 50 réplicas o más.
    """
    if model_kind not in ("pooled", "full", "partial"):
        raise InvalidDesign(f"modelo no admitido en SBC: {model_kind}")
    if model_kind != "pooled" and len(design.treatments) < 2:
        raise InvalidDesign("el SBC jerárquico necesita al menos dos tratamientos")
    validate_design(design)
    inner = s.model_copy(update={"workers": 1})

    def run(rep: int):
        rng = np.random.default_rng([s.seed, rep])
        rep_design, truth = _draw_truth(design, priors, model_kind, rng)
        try:
            dataset = simulate_dataset(rep_design)
            blocks = build_study_blocks(dataset, default_rho=design.rho_within,
                                        shared_control_rho=design.shared_control_rho)
            posterior = fit_model(blocks, model_kind, priors, inner.model_copy(update={"seed": s.seed + rep}))
        except SurrogacyError as e:
            logger.error(f"SBC: fallo en la réplica {rep}: {e}")
            e.add_note(f"réplica SBC {rep}")
            raise
        ranks, covered = {}, {}
        used = 0
        for name, value in truth.items():
            draws = posterior.draws(name)
            used, _ = rank_bins(draws.size)
            ranks[name] = int(np.sum(_thin_evenly(draws, used) < value))
            lo, hi = np.quantile(draws, [0.025, 0.975])
            covered[name] = bool(lo <= value <= hi)
        logger.debug(f"SBC: réplica {rep + 1}/{reps} completada")
        return ranks, covered, used

    logger.info(f"SBC: {reps} réplicas del modelo '{model_kind}'")
    if s.workers > 1:
        with ThreadPoolExecutor(max_workers=s.workers) as pool:
            results = list(pool.map(run, range(reps)))
    else:
        results = [run(r) for r in range(reps)]

    n_draws = results[0][2]
    _, bins = rank_bins(n_draws)
    if reps < MIN_SBC_REPS_FOR_TEST:
        logger.warning(f"SBC con {reps} réplicas: no se calcula el test de uniformidad "
                       f"(se necesitan al menos {MIN_SBC_REPS_FOR_TEST})")
    parameters: Dict[str, SbcParameterResult] = {}
    for name in results[0][0]:
        ranks = [r[0][name] for r in results]
        histogram, _ = np.histogram(ranks, bins=bins, range=(0, n_draws + 1))
        chi2: Optional[float] = None
        p_value: Optional[float] = None
        if reps >= MIN_SBC_REPS_FOR_TEST:
            test = stats.chisquare(histogram)
            chi2, p_value = float(test.statistic), float(test.pvalue)
        parameters[name] = SbcParameterResult(
            parameter=name,
            ranks=ranks,
            n_draws=n_draws,
            coverage=float(np.mean([r[1][name] for r in results])),
            chi2=chi2,
            p_value=p_value,
            histogram=[int(h) for h in histogram],
        )
        logger.info(f"SBC {name}: cobertura {parameters[name].coverage:.2f}"
                    + (f", p(uniformidad) = {p_value:.3f}" if p_value is not None else ""))
    return SbcReport(reps=reps, model_kind=model_kind, parameters=parameters,
                     extra={"seed": s.seed, "iterations": s.iterations, "burn_in": s.burn_in, "thin": s.thin,
                            "chains": s.chains})
