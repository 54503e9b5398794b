# surrogacy.py
"""
Modelo bivariante de subrogación a nivel de ensayo (agrupado y por subgrupo de
tratamiento) y sus extensiones jerárquicas con intercambiabilidad total o parcial.

Estructura del modelo, por contraste i del estudio s:
    (y1_i, y2_i) observados ~ Normal multivariante((delta1_i, delta2_i), Sigma_within_s)
    delta2_i | delta1_i ~ Normal(lambda0 + lambda1 * delta1_i [+ lambda2 * x_i], psi^2)

El muestreador integra delta2 analíticamente: la covarianza marginal de cada estudio
es Sigma_within + psi^2 en la diagonal de las filas y2. Así quedan pasos de Gibbs
para delta1 y para los coeficientes de regresión, y Metropolis sobre psi.

Disposición de los arrays empaquetados: los estudios se rellenan hasta K_max
contrastes; la fila 2k corresponde a y1 del contraste k y la fila 2k+1 a su y2.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from config import McmcSettings, PriorConfig
from data_model import StudyBlock, blocks_for_treatment
from errors import (
    InsufficientData, MissingCovariate, MixedOutcome, MixedScale, SingleTreatment,
    TreatmentMismatch, UnknownParameter, UnknownTreatment,
)
from mcmc import Chain, MetropolisBlock, diagnostics, pooled_draws, run_chains, summarize
from models import BandRow, DiagnosticsReport, PosteriorSummary, SurrogacyVerdict, WidthReduction

logger = logging.getLogger(__name__)

MIN_CONTRASTS = 3
JITTER = 1e-12
HierarchyMode = Literal["full", "partial"]


# --- Empaquetado de los bloques ---

@dataclass(frozen=True)
class StudyDesign:
    """Bloques de estudio empaquetados en arrays rellenos para el álgebra por lotes."""
    study_ids: Tuple[str, ...]
    contrast_keys: Tuple[str, ...]
    positions: Tuple[Tuple[int, int], ...]
    treatments: Tuple[str, ...]
    y: np.ndarray             # (S, D)
    sigma: np.ndarray         # (S, D, D)
    mask: np.ndarray          # (S, D) 1.0 = observado
    contrast_mask: np.ndarray  # (S, K)
    treat_idx: np.ndarray     # (S, K)
    x: np.ndarray             # (S, K) covariable centrada
    se2: np.ndarray           # (S, K)
    covariate: str = "none"
    covariate_center: Optional[float] = None

    @property
    def n_studies(self) -> int:
        return self.y.shape[0]

    @property
    def k_max(self) -> int:
        return self.contrast_mask.shape[1]

    @property
    def has_covariate(self) -> bool:
        return self.covariate != "none"

    @property
    def n_observed_final(self) -> int:
        return int(self.mask[:, 1::2].sum())

    def studies_for(self, j: int) -> np.ndarray:
        return np.flatnonzero(np.any((self.treat_idx == j) & self.contrast_mask, axis=1))


def _covariate_value(contrast, covariate: str) -> Optional[float]:
    if covariate == "aria":
        return contrast.aria_effect
    if covariate == "apoe":
        return contrast.apoe_prop
    return 0.0


def _check_homogeneous(blocks: Sequence[StudyBlock]) -> None:
    contrasts = [c for b in blocks for c in b.contrasts]
    outcomes = {c.outcome.value for c in contrasts}
    if len(outcomes) > 1:
        raise MixedOutcome(outcomes)
    scales = {c.surrogate_scale.value for c in contrasts}
    if len(scales) > 1:
        raise MixedScale(scales)


def pack_blocks(blocks: Sequence[StudyBlock], treatments: Optional[Sequence[str]] = None,
                covariate: str = "none") -> StudyDesign:
    """
    Empaqueta los bloques para el muestreador.

    Args:
        blocks: Bloques de estudio (posiblemente con y2 ocultos).
        treatments: Orden de los tratamientos; None agrupa todos en uno solo.
        covariate: 'none', 'aria' (efecto sobre ARIA) o 'apoe' (proporción de portadores).

    Raises:
        MissingCovariate: Si algún contraste carece de la covariable elegida.
    """
    n_studies = len(blocks)
    k_max = max(b.size for b in blocks)
    d = 2 * k_max
    y = np.zeros((n_studies, d))
    sigma = np.zeros((n_studies, d, d))
    mask = np.zeros((n_studies, d))
    contrast_mask = np.zeros((n_studies, k_max), dtype=bool)
    treat_idx = np.zeros((n_studies, k_max), dtype=np.int64)
    x = np.zeros((n_studies, k_max))
    se2 = np.ones((n_studies, k_max))
    lookup = {t: j for j, t in enumerate(treatments)} if treatments else None

    keys, positions, missing = [], [], []
    for s, block in enumerate(blocks):
        size = 2 * block.size
        sigma[s, :size, :size] = block.sigma_within
        for k, c in enumerate(block.contrasts):
            y[s, 2 * k] = c.y1
            y[s, 2 * k + 1] = c.y2
            mask[s, 2 * k] = 1.0
            mask[s, 2 * k + 1] = 1.0 if block.y2_observed[k] else 0.0
            contrast_mask[s, k] = True
            treat_idx[s, k] = lookup[c.treatment] if lookup else 0
            se2[s, k] = c.se2
            value = _covariate_value(c, covariate)
            if value is None:
                missing.append(c.key)
            else:
                x[s, k] = value
            keys.append(c.key)
            positions.append((s, k))
    if missing:
        raise MissingCovariate(covariate, missing)

    center = None
    if covariate != "none":
        center = float(x[contrast_mask].mean())
        x = np.where(contrast_mask, x - center, 0.0)

    return StudyDesign(
        study_ids=tuple(b.study_id for b in blocks),
        contrast_keys=tuple(keys),
        positions=tuple(positions),
        treatments=tuple(treatments) if treatments else ("all",),
        y=y, sigma=sigma, mask=mask, contrast_mask=contrast_mask, treat_idx=treat_idx,
        x=x, se2=se2, covariate=covariate, covariate_center=center,
    )


# --- Distribución a priori de psi ---

def _normal_logpdf(x, mean, sd):
    return -0.5 * ((x - mean) / sd) ** 2 - np.log(sd)


def _halfnormal_logpdf(x: float, scale: float) -> float:
    if x <= 0:
        return -math.inf
    return -0.5 * (x / scale) ** 2


@dataclass(frozen=True)
class PsiPrior:
    """A priori sobre la DE condicional psi, evaluada en la escala de psi."""
    kind: str
    upper: float = 2.0
    scale: float = 1.0
    shape: float = 0.001
    rate: float = 0.001
    fixed: Optional[float] = None

    @classmethod
    def from_config(cls, priors: PriorConfig) -> "PsiPrior":
        return cls(kind=priors.psi_prior, upper=priors.psi_upper, scale=priors.psi_halfnormal_scale,
                   shape=priors.gamma_shape, rate=priors.gamma_rate, fixed=priors.psi_fixed)

    @property
    def is_fixed(self) -> bool:
        return self.kind == "fixed"

    def log_density(self, psi: float) -> float:
        if psi <= 0:
            return -math.inf
        if self.kind == "uniform":
            return 0.0 if psi < self.upper else -math.inf
        if self.kind == "halfnormal":
            return _halfnormal_logpdf(psi, self.scale)
        if self.kind == "gamma-precision":
            # precisión tau = psi^-2 ~ Gamma(shape, rate); jacobiano |dtau/dpsi| = 2 psi^-3
            log_psi = math.log(psi)
            return (self.shape - 1.0) * (-2.0 * log_psi) - self.rate / psi ** 2 + math.log(2.0) - 3.0 * log_psi
        return 0.0

    def initial_value(self) -> float:
        if self.is_fixed:
            return float(self.fixed)
        if self.kind == "uniform":
            return min(0.5, self.upper / 2.0)
        return 0.5

    def sample(self, rng: np.random.Generator) -> float:
        if self.is_fixed:
            return float(self.fixed)
        if self.kind == "uniform":
            return float(rng.uniform(0.0, self.upper))
        if self.kind == "halfnormal":
            return float(abs(rng.normal(0.0, self.scale)))
        return float(1.0 / math.sqrt(rng.gamma(self.shape, 1.0 / self.rate)))


# --- Estado y modelo ---

@dataclass
class SurrogacyState:
    delta1: np.ndarray
    beta: np.ndarray
    psi: np.ndarray
    b: np.ndarray = field(default_factory=lambda: np.zeros(2))
    t: np.ndarray = field(default_factory=lambda: np.ones(2))
    b_psi: float = 0.0
    t_psi: float = 1.0
    w: np.ndarray = field(default_factory=lambda: np.ones(0))
    z: np.ndarray = field(default_factory=lambda: np.ones(0, dtype=bool))
    omega_inv: Optional[np.ndarray] = None
    logdet: Optional[np.ndarray] = None
    saved: Optional[tuple] = None


def _sample_mvn_precision(q: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Extrae de Normal(Q^-1 b, Q^-1) por lotes (Q de forma (..., n, n))."""
    chol = np.linalg.cholesky(q)
    mean = np.linalg.solve(q, b[..., None])[..., 0]
    z = rng.standard_normal(b.shape)
    noise = np.linalg.solve(np.swapaxes(chol, -1, -2), z[..., None])[..., 0]
    return mean + noise


class SurrogacyModel:
    """
    Posterior del modelo de subrogación para el núcleo MCMC.

    `hierarchy=None` da el modelo de una sola relación (agrupado o por subgrupo);
    'full' y 'partial' dan una relación por tratamiento intercambiable alrededor de
    hipermedias, con mezcla frente a un componente vago en el modo parcial.
    """

    def __init__(self, design: StudyDesign, priors: PriorConfig, hierarchy: Optional[HierarchyMode] = None):
        self.design = design
        self.priors = priors
        self.hierarchy = hierarchy
        self.psi_prior = PsiPrior.from_config(priors)
        self.n_treatments = len(design.treatments) if hierarchy else 1
        self.common_psi = hierarchy is None or priors.psi_structure == "common" or self.psi_prior.is_fixed
        self.n_beta = 2 * self.n_treatments + (1 if design.has_covariate else 0)
        self._study_sets = [design.studies_for(j) for j in range(self.n_treatments)]
        self._all_studies = np.arange(design.n_studies)
        self._rows, self._cols = (np.array(v) for v in zip(*design.positions))
        self.parameter_names = self._build_names()

    # --- nombres y aplanado ---

    def _build_names(self) -> List[str]:
        d = self.design
        names: List[str] = []
        if self.hierarchy:
            names += [f"lambda0[{t}]" for t in d.treatments]
            names += [f"lambda1[{t}]" for t in d.treatments]
        else:
            names += ["lambda0", "lambda1"]
        if d.has_covariate:
            names.append("lambda2")
        if self.hierarchy and not self.common_psi:
            names += [f"psi[{t}]" for t in d.treatments]
            names += [f"psi2[{t}]" for t in d.treatments]
        else:
            names += ["psi", "psi2"]
        if self.hierarchy:
            names += ["b0", "b1", "t0", "t1"]
            if not self.common_psi:
                names += ["b_psi", "t_psi"]
            if self.hierarchy == "partial":
                names += [f"w[{t}]" for t in d.treatments]
        names += [f"delta1[{key}]" for key in d.contrast_keys]
        return names

    def flatten(self, state: SurrogacyState) -> np.ndarray:
        parts = [state.beta]
        psi = state.psi if not self.common_psi else state.psi[:1]
        parts += [psi, psi ** 2]
        if self.hierarchy:
            parts += [state.b, state.t]
            if not self.common_psi:
                parts.append(np.array([state.b_psi, state.t_psi]))
            if self.hierarchy == "partial":
                parts.append(state.w)
        parts.append(state.delta1[self._rows, self._cols])
        return np.concatenate(parts)

    # --- verosimilitud marginal por estudio ---

    def _omega(self, psi: np.ndarray, studies: np.ndarray) -> np.ndarray:
        d = self.design
        om = d.sigma[studies].copy()
        y2_rows = np.arange(1, 2 * d.k_max, 2)
        om[:, y2_rows, y2_rows] += (psi[d.treat_idx[studies]] ** 2) * d.contrast_mask[studies]
        m = d.mask[studies]
        om *= m[:, :, None] * m[:, None, :]
        diag = np.arange(2 * d.k_max)
        om[:, diag, diag] += (1.0 - m) + JITTER
        return om

    def _refresh(self, state: SurrogacyState, studies: np.ndarray) -> None:
        om = self._omega(state.psi, studies)
        sign, logdet = np.linalg.slogdet(om)
        state.logdet[studies] = np.where(sign > 0, logdet, np.inf)
        state.omega_inv[studies] = np.linalg.inv(om)

    def _residual(self, state: SurrogacyState, studies: np.ndarray) -> np.ndarray:
        d = self.design
        j = d.treat_idx[studies]
        nt = self.n_treatments
        delta1 = state.delta1[studies]
        mean = np.empty((len(studies), 2 * d.k_max))
        mean[:, 0::2] = delta1
        mean[:, 1::2] = state.beta[j] + state.beta[nt + j] * delta1
        if d.has_covariate:
            mean[:, 1::2] += state.beta[2 * nt] * d.x[studies]
        return (d.y[studies] - mean) * d.mask[studies]

    def log_likelihood(self, state: SurrogacyState, studies: Optional[np.ndarray] = None) -> float:
        studies = self._all_studies if studies is None else studies
        if len(studies) == 0:
            return 0.0
        if not np.all(np.isfinite(state.logdet[studies])):
            return -math.inf
        r = self._residual(state, studies)
        quad = np.einsum("sd,sde,se->s", r, state.omega_inv[studies], r)
        return float(-0.5 * np.sum(state.logdet[studies] + quad))

    def _set_psi(self, state: SurrogacyState, j: Optional[int], value: float) -> None:
        """Fija psi (de un tratamiento, o de todos si j es None) y refresca la caché afectada."""
        studies = self._all_studies if j is None else self._study_sets[j]
        current = state.psi[0] if j is None else state.psi[j]
        if state.saved is not None and state.saved[0] == (j, value):
            _, psi, omega_inv, logdet = state.saved
            state.psi = psi
            state.omega_inv[studies] = omega_inv
            state.logdet[studies] = logdet
            state.saved = None
            return
        state.saved = ((j, current), state.psi.copy(), state.omega_inv[studies].copy(), state.logdet[studies].copy())
        if j is None:
            state.psi = np.full_like(state.psi, value)
        else:
            state.psi = state.psi.copy()
            state.psi[j] = value
        self._refresh(state, studies)

    # --- priors de los coeficientes ---

    def _beta_prior(self, state: SurrogacyState) -> Tuple[np.ndarray, np.ndarray]:
        nt = self.n_treatments
        c2 = 1.0 / self.priors.coefficient_sd ** 2
        mean = np.zeros(self.n_beta)
        prec = np.full(self.n_beta, c2)
        if self.hierarchy:
            exch = np.ones(nt, dtype=bool) if self.hierarchy == "full" else state.z
            for k in (0, 1):
                sl = slice(k * nt, (k + 1) * nt)
                mean[sl] = np.where(exch, state.b[k], 0.0)
                prec[sl] = np.where(exch, 1.0 / state.t[k] ** 2, c2)
        return mean, prec

    def _beta_prior_marginal(self, state: SurrogacyState) -> np.ndarray:
        """
        Precisión a priori de los coeficientes con las hipermedias (b0, b1) integradas.

        Para los k tratamientos intercambiables, Cov(lambda) = t^2 I + s^2 J con s la DE
        de la hipermedia; su inversa se separa en la dirección del vector de unos y su
        complemento. La media a priori es 0.
        """
        nt = self.n_treatments
        c2 = 1.0 / self.priors.coefficient_sd ** 2
        prec = np.diag(np.full(self.n_beta, c2))
        if not self.hierarchy:
            return prec
        exch = np.flatnonzero(self._exchangeable(state))
        n = exch.size
        if n == 0:
            return prec
        s2 = self.priors.hypermean_sd ** 2
        ones = np.full((n, n), 1.0 / n)
        for k in (0, 1):
            t2 = float(state.t[k]) ** 2
            idx = k * nt + exch
            prec[np.ix_(idx, idx)] = (np.eye(n) - ones) / t2 + ones / (t2 + n * s2)
        return prec

    def _exchangeable(self, state: SurrogacyState) -> np.ndarray:
        if self.hierarchy == "partial":
            return state.z
        return np.ones(self.n_treatments, dtype=bool)

    # --- pasos de Gibbs ---

    def _gibbs_delta1(self, state: SurrogacyState, rng: np.random.Generator) -> None:
        d = self.design
        nt = self.n_treatments
        k = np.arange(d.k_max)
        j = d.treat_idx
        a_mat = np.zeros((d.n_studies, 2 * d.k_max, d.k_max))
        a_mat[:, 2 * k, k] = 1.0
        a_mat[:, 2 * k + 1, k] = state.beta[nt + j]
        a_mat *= d.mask[:, :, None]
        offset = np.zeros((d.n_studies, 2 * d.k_max))
        offset[:, 1::2] = state.beta[j]
        if d.has_covariate:
            offset[:, 1::2] += state.beta[2 * nt] * d.x
        at_o = np.einsum("sdk,sde->ske", a_mat, state.omega_inv)
        prior_prec = 1.0 / self.priors.delta1_sd ** 2
        q = at_o @ a_mat + prior_prec * np.eye(d.k_max)
        rhs = np.einsum("ske,se->sk", at_o, (d.y - offset) * d.mask) + prior_prec * self.priors.delta1_mean
        state.delta1 = np.where(d.contrast_mask, _sample_mvn_precision(q, rhs, rng), 0.0)

    def _gibbs_beta(self, state: SurrogacyState, rng: np.random.Generator) -> None:
        d = self.design
        nt = self.n_treatments
        onehot = (d.treat_idx[..., None] == np.arange(nt)) & d.contrast_mask[..., None]
        x_mat = np.zeros((d.n_studies, 2 * d.k_max, self.n_beta))
        x_mat[:, 1::2, :nt] = onehot
        x_mat[:, 1::2, nt:2 * nt] = onehot * state.delta1[..., None]
        if d.has_covariate:
            x_mat[:, 1::2, 2 * nt] = d.x * d.contrast_mask
        x_mat *= d.mask[:, :, None]
        target = d.y.copy()
        target[:, 0::2] -= state.delta1
        target *= d.mask
        xt_o = np.einsum("sdp,sde->spe", x_mat, state.omega_inv)
        q = np.einsum("spe,seq->pq", xt_o, x_mat) + self._beta_prior_marginal(state)
        rhs = np.einsum("spe,se->p", xt_o, target)
        state.beta = _sample_mvn_precision(q, rhs, rng)

    def _gibbs_hyper(self, state: SurrogacyState, rng: np.random.Generator) -> None:
        # b se extrae justo después de los coeficientes, que se muestrearon con b integrada.
        nt = self.n_treatments
        pr = self.priors
        exch = self._exchangeable(state)
        for k in (0, 1):
            lam = state.beta[k * nt:(k + 1) * nt][exch]
            prec = 1.0 / pr.hypermean_sd ** 2 + lam.size / state.t[k] ** 2
            mean = (lam.sum() / state.t[k] ** 2) / prec
            state.b[k] = mean + rng.standard_normal() / math.sqrt(prec)
        if self.hierarchy == "partial":
            lam0, lam1 = state.beta[:nt], state.beta[nt:2 * nt]
            c = pr.coefficient_sd
            log_p1 = (np.log(state.w) + _normal_logpdf(lam0, state.b[0], state.t[0])
                      + _normal_logpdf(lam1, state.b[1], state.t[1]))
            log_p0 = np.log1p(-state.w) + _normal_logpdf(lam0, 0.0, c) + _normal_logpdf(lam1, 0.0, c)
            state.z = rng.uniform(size=nt) < expit(log_p1 - log_p0)
            z = state.z.astype(float)
            state.w = rng.beta(1.0 + z, 2.0 - z)
        if not self.common_psi:
            log_psi = np.log(state.psi)
            prec = 1.0 / pr.log_psi_mean_sd ** 2 + nt / state.t_psi ** 2
            mean = (pr.log_psi_mean / pr.log_psi_mean_sd ** 2 + log_psi.sum() / state.t_psi ** 2) / prec
            state.b_psi = float(mean + rng.standard_normal() / math.sqrt(prec))

    def gibbs_step(self, state: SurrogacyState, rng: np.random.Generator) -> None:
        state.saved = None
        self._gibbs_delta1(state, rng)
        self._gibbs_beta(state, rng)
        if self.hierarchy:
            self._gibbs_hyper(state, rng)

    # --- bloques Metropolis ---

    def _psi_target(self, j: Optional[int]):
        if j is None:
            def target(state: SurrogacyState) -> float:
                return self.log_likelihood(state) + self.psi_prior.log_density(float(state.psi[0]))
            return target
        studies = self._study_sets[j]

        def target(state: SurrogacyState) -> float:
            psi = float(state.psi[j])
            if psi <= 0:
                return -math.inf
            prior = float(_normal_logpdf(math.log(psi), state.b_psi, state.t_psi)) - math.log(psi)
            return self.log_likelihood(state, studies) + prior
        return target

    def _hyper_sd_target(self, k: int):
        def target(state: SurrogacyState) -> float:
            t = float(state.t[k])
            if t <= 0:
                return -math.inf
            lam = state.beta[k * self.n_treatments:(k + 1) * self.n_treatments][self._exchangeable(state)]
            return float(np.sum(_normal_logpdf(lam, state.b[k], t))) + _halfnormal_logpdf(t, self.priors.hyper_sd_scale)
        return target

    def _t_psi_target(self, state: SurrogacyState) -> float:
        if state.t_psi <= 0:
            return -math.inf
        dens = np.sum(_normal_logpdf(np.log(state.psi), state.b_psi, state.t_psi))
        return float(dens) + _halfnormal_logpdf(state.t_psi, self.priors.log_psi_sd_scale)

    def metropolis_blocks(self) -> List[MetropolisBlock]:
        blocks: List[MetropolisBlock] = []
        if self.common_psi:
            if not self.psi_prior.is_fixed:
                blocks.append(MetropolisBlock(
                    name="psi",
                    get=lambda s: float(s.psi[0]),
                    set=lambda s, v: self._set_psi(s, None, v),
                    log_target=self._psi_target(None),
                ))
        else:
            for j, t in enumerate(self.design.treatments):
                blocks.append(MetropolisBlock(
                    name=f"psi[{t}]",
                    get=lambda s, j=j: float(s.psi[j]),
                    set=lambda s, v, j=j: self._set_psi(s, j, v),
                    log_target=self._psi_target(j),
                ))
        if self.hierarchy:
            for k in (0, 1):
                blocks.append(MetropolisBlock(
                    name=f"t{k}",
                    get=lambda s, k=k: float(s.t[k]),
                    set=lambda s, v, k=k: s.t.__setitem__(k, v),
                    log_target=self._hyper_sd_target(k),
                ))
            if not self.common_psi:
                blocks.append(MetropolisBlock(
                    name="t_psi",
                    get=lambda s: float(s.t_psi),
                    set=lambda s, v: setattr(s, "t_psi", v),
                    log_target=self._t_psi_target,
                ))
        return blocks

    # --- densidad conjunta ---

    def log_density(self, state: SurrogacyState) -> float:
        pr = self.priors
        if np.any(state.psi <= 0) or (self.hierarchy and (np.any(state.t <= 0) or state.t_psi <= 0)):
            return -math.inf
        total = self.log_likelihood(state)
        delta1 = state.delta1[self.design.contrast_mask]
        total += float(np.sum(_normal_logpdf(delta1, pr.delta1_mean, pr.delta1_sd)))
        mean, prec = self._beta_prior(state)
        total += float(np.sum(-0.5 * prec * (state.beta - mean) ** 2 + 0.5 * np.log(prec)))
        if self.common_psi:
            total += self.psi_prior.log_density(float(state.psi[0]))
        else:
            total += float(np.sum(_normal_logpdf(np.log(state.psi), state.b_psi, state.t_psi) - np.log(state.psi)))
            total += float(_normal_logpdf(state.b_psi, pr.log_psi_mean, pr.log_psi_mean_sd))
            total += _halfnormal_logpdf(state.t_psi, pr.log_psi_sd_scale)
        if self.hierarchy:
            total += float(np.sum(_normal_logpdf(state.b, 0.0, pr.hypermean_sd)))
            total += sum(_halfnormal_logpdf(float(t), pr.hyper_sd_scale) for t in state.t)
            if self.hierarchy == "partial":
                if np.any((state.w <= 0) | (state.w >= 1)):
                    return -math.inf
                total += float(np.sum(np.where(state.z, np.log(state.w), np.log1p(-state.w))))
        return total

    # --- estados iniciales ---

    def initial_state(self, chain_index: int, seed: int) -> SurrogacyState:
        """Estado inicial con una pequeña perturbación por cadena (delta1 = y1, coeficientes = 0)."""
        d = self.design
        rng = np.random.default_rng([seed, chain_index, 7])
        nt = self.n_treatments
        y1 = d.y[:, 0::2]
        se1 = np.sqrt(np.diagonal(d.sigma, axis1=1, axis2=2)[:, 0::2])
        delta1 = np.where(d.contrast_mask, y1 + 0.1 * se1 * rng.standard_normal(y1.shape), 0.0)
        psi0 = self.psi_prior.initial_value()
        if not self.psi_prior.is_fixed:
            psi0 *= rng.uniform(0.8, 1.2)
        t0 = min(0.5, self.priors.hyper_sd_scale)
        state = SurrogacyState(
            delta1=delta1,
            beta=0.01 * rng.standard_normal(self.n_beta),
            psi=np.full(nt, psi0),
            b=np.zeros(2),
            t=np.full(2, t0) * rng.uniform(0.9, 1.1, size=2),
            b_psi=math.log(psi0),
            t_psi=min(0.5, self.priors.log_psi_sd_scale),
            w=np.full(nt, 0.5),
            z=np.ones(nt, dtype=bool),
            omega_inv=np.zeros((d.n_studies, 2 * d.k_max, 2 * d.k_max)),
            logdet=np.zeros(d.n_studies),
        )
        self._refresh(state, self._all_studies)
        return state


# --- Posteriores ---

@dataclass
class SurrogacyPosterior:
    """Extracciones y resúmenes de un ajuste con una sola relación de subrogación."""
    scope: str
    chains: List[Chain]
    summaries: Dict[str, PosteriorSummary]
    diagnostics: DiagnosticsReport
    priors: PriorConfig
    settings: McmcSettings
    design: StudyDesign

    @property
    def treatments(self) -> List[str]:
        return list(self.design.treatments)

    @property
    def parameter_names(self) -> List[str]:
        return list(self.chains[0].parameter_names)

    def draws(self, name: str) -> np.ndarray:
        return pooled_draws(self.chains, name)

    def summary(self, name: str) -> PosteriorSummary:
        try:
            return self.summaries[name]
        except KeyError:
            raise UnknownParameter(name) from None

    def parameter_name(self, base: str, treatment: Optional[str] = None) -> str:
        return base

    def relationship_draws(self, treatment: Optional[str] = None) -> Tuple[np.ndarray, ...]:
        """Extracciones (lambda0, lambda1, lambda2, psi) de la relación de un tratamiento."""
        lam0 = self.draws(self.parameter_name("lambda0", treatment))
        lam1 = self.draws(self.parameter_name("lambda1", treatment))
        lam2 = self.draws("lambda2") if self.design.has_covariate else np.zeros_like(lam0)
        psi = self.draws(self.parameter_name("psi", treatment))
        return lam0, lam1, lam2, psi


@dataclass
class HierarchicalPosterior(SurrogacyPosterior):
    mode: HierarchyMode = "full"
    selected: Tuple[str, ...] = ()

    @property
    def treatments(self) -> List[str]:
        return list(self.selected or self.design.treatments)

    def parameter_name(self, base: str, treatment: Optional[str] = None) -> str:
        if base in ("lambda2", "b0", "b1", "t0", "t1", "b_psi", "t_psi"):
            return base
        if treatment is None:
            raise UnknownParameter(f"{base} (falta el tratamiento)")
        if treatment not in self.design.treatments:
            raise UnknownTreatment(treatment)
        if base in ("psi", "psi2") and "psi" in self.summaries:
            return base
        return f"{base}[{treatment}]"

    @property
    def mixture_weights(self) -> Dict[str, float]:
        """Media posterior de los pesos de mezcla (solo modo parcial)."""
        if self.mode != "partial":
            return {}
        return {t: self.summaries[f"w[{t}]"].mean for t in self.design.treatments}

    def subset(self, treatments: Sequence[str]) -> "HierarchicalPosterior":
        """Vista del ajuste limitada a algunos tratamientos (para comparar con subgrupos)."""
        for t in treatments:
            if t not in self.design.treatments:
                raise UnknownTreatment(t)
        return replace(self, selected=tuple(treatments))


# --- Ajustes ---

def _fit(blocks: Sequence[StudyBlock], priors: PriorConfig, s: McmcSettings, scope: str,
         covariate: str, hierarchy: Optional[HierarchyMode], treatments: Optional[Sequence[str]]):
    if not blocks:
        raise InsufficientData(0, MIN_CONTRASTS)
    _check_homogeneous(blocks)
    design = pack_blocks(blocks, treatments, covariate)
    if design.n_observed_final < MIN_CONTRASTS:
        raise InsufficientData(design.n_observed_final, MIN_CONTRASTS)
    model = SurrogacyModel(design, priors, hierarchy)
    logger.info(f"Ajuste '{scope}': {design.n_studies} estudios, {len(design.contrast_keys)} contrastes "
                f"({design.n_observed_final} con resultado final observado), covariable '{covariate}'")
    inits = [model.initial_state(i, s.seed) for i in range(s.chains)]
    chains = run_chains(model, inits, s)
    report = diagnostics(chains)
    summaries = {name: summarize(chains, name, report) for name in model.parameter_names}
    common = dict(scope=scope, chains=chains, summaries=summaries, diagnostics=report,
                  priors=priors, settings=s, design=design)
    if hierarchy:
        return HierarchicalPosterior(mode=hierarchy, **common)
    return SurrogacyPosterior(**common)


def fit_pooled(blocks: Sequence[StudyBlock], priors: PriorConfig, s: McmcSettings,
               covariate: str = "none", scope: str = "pooled") -> SurrogacyPosterior:
    """
    Ajusta una única relación de subrogación a todos los contrastes.

    Raises:
        InsufficientData: Menos de 3 contrastes con resultado final observado.
        MixedOutcome, MixedScale: Si los contrastes no son homogéneos.
    """
    return _fit(blocks, priors, s, scope, covariate, None, None)


def fit_subgroup(blocks: Sequence[StudyBlock], treatment: str, priors: PriorConfig, s: McmcSettings,
                 covariate: str = "none") -> SurrogacyPosterior:
    """Ajuste agrupado restringido a los contrastes de un tratamiento."""
    subset = blocks_for_treatment(blocks, treatment)
    if not subset:
        raise UnknownTreatment(treatment)
    return _fit(subset, priors, s, f"subgroup:{treatment}", covariate, None, [treatment])


def treatment_order(blocks: Sequence[StudyBlock]) -> List[str]:
    return list(dict.fromkeys(c.treatment for b in blocks for c in b.contrasts))


def fit_hierarchical(blocks: Sequence[StudyBlock], mode: HierarchyMode, priors: PriorConfig,
                     s: McmcSettings, covariate: str = "none") -> HierarchicalPosterior:
    """
    Ajuste jerárquico con una relación por tratamiento.

    En modo 'full' los (lambda0_j, lambda1_j) son intercambiables alrededor de (b0, b1)
    con DE (t0, t1); en modo 'partial' cada par procede de una mezcla entre ese
    componente y uno vago independiente, con peso w_j ~ Uniform(0, 1).

    Raises:
        SingleTreatment: Si solo hay un tratamiento.
        InsufficientData: Menos de 3 contrastes con resultado final observado.
    """
    if mode not in ("full", "partial"):
        raise ValueError(f"Modo jerárquico desconocido: {mode}")
    treatments = treatment_order(blocks)
    if len(treatments) < 2:
        raise SingleTreatment(treatments[0] if treatments else None)
    return _fit(blocks, priors, s, f"hierarchical:{mode}", covariate, mode, treatments)


def fit_model(blocks: Sequence[StudyBlock], kind: str, priors: PriorConfig, s: McmcSettings,
              treatment: Optional[str] = None, covariate: str = "none") -> SurrogacyPosterior:
    """Despacha al ajuste correspondiente a `kind` (pooled, subgroup, full, partial)."""
    if kind == "pooled":
        return fit_pooled(blocks, priors, s, covariate)
    if kind == "subgroup":
        if not treatment:
            raise UnknownTreatment("")
        return fit_subgroup(blocks, treatment, priors, s, covariate)
    return fit_hierarchical(blocks, kind, priors, s, covariate)


# --- Criterios y resúmenes derivados ---

def evaluate_criteria(p: SurrogacyPosterior, psi2_threshold: float,
                      treatment: Optional[str] = None) -> SurrogacyVerdict:
    """
    Criterios de subrogación: CrI del intercepto contiene 0, CrI de la pendiente
    excluye 0 y mediana de psi2 por debajo del umbral.
    """
    intercept = p.summary(p.parameter_name("lambda0", treatment))
    slope = p.summary(p.parameter_name("lambda1", treatment))
    psi2 = p.summary(p.parameter_name("psi2", treatment))
    intercept_ok = intercept.q2_5 <= 0.0 <= intercept.q97_5
    slope_ok = not (slope.q2_5 <= 0.0 <= slope.q97_5)
    variance_ok = psi2.q50 < psi2_threshold
    if not slope_ok:
        label = "not-supported"
    elif intercept_ok and variance_ok:
        label = "supported"
    else:
        label = "weak"
    return SurrogacyVerdict(intercept_contains_zero=intercept_ok, slope_excludes_zero=slope_ok,
                            variance_below_threshold=variance_ok, psi2_threshold=psi2_threshold, label=label)


def band_grid(y1_values: Sequence[float], points: int = 51) -> np.ndarray:
    """Rejilla sobre el rango observado de y1 ampliado un 10% por cada lado; incluye el 0."""
    lo, hi = float(np.min(y1_values)), float(np.max(y1_values))
    pad = 0.1 * (hi - lo) if hi > lo else max(abs(hi), 1.0) * 0.1
    grid = np.linspace(lo - pad, hi + pad, points)
    return np.unique(np.append(grid, 0.0))


def regression_band(p: SurrogacyPosterior, grid: Sequence[float],
                    treatment: Optional[str] = None) -> List[BandRow]:
    """Media posterior e intervalo central al 95% de lambda0 + lambda1·x en cada punto."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("La rejilla de la banda está vacía")
    lam0, lam1, _, _ = p.relationship_draws(treatment)
    values = lam0[None, :] + grid[:, None] * lam1[None, :]
    lo, hi = np.quantile(values, [0.025, 0.975], axis=1)
    label = treatment or (p.treatments[0] if len(p.treatments) == 1 else "all")
    return [BandRow(treatment=label, x=float(x), mean=float(m), lo=float(a), hi=float(b))
            for x, m, a, b in zip(grid, values.mean(axis=1), lo, hi)]


def _width(summary: PosteriorSummary) -> float:
    return summary.q97_5 - summary.q2_5


WIDTH_PARAMETERS = ("lambda1", "psi2", "lambda0")


def width_reduction(subgroup: Mapping[str, SurrogacyPosterior], hier) -> WidthReduction:
    """
    Reducción relativa de la anchura del CrI al 95% del ajuste jerárquico frente a
    los subgrupos: (anchura_sub - anchura_jer) / anchura_sub, por tratamiento y parámetro.

    Raises:
        TreatmentMismatch: Si los tratamientos de ambos lados no coinciden.
    """
    if set(subgroup) != set(hier.treatments):
        raise TreatmentMismatch(subgroup.keys(), hier.treatments)
    per_treatment: Dict[str, Dict[str, float]] = {}
    for t in hier.treatments:
        sub = subgroup[t]
        reductions = {}
        for base in WIDTH_PARAMETERS:
            w_sub = _width(sub.summary(sub.parameter_name(base, t)))
            w_hier = _width(hier.summary(hier.parameter_name(base, t)))
            reductions[base] = (w_sub - w_hier) / w_sub if w_sub > 0 else 0.0
        per_treatment[t] = reductions
    average = {b: float(np.mean([r[b] for r in per_treatment.values()])) for b in WIDTH_PARAMETERS}
    minimum = {b: float(np.min([r[b] for r in per_treatment.values()])) for b in WIDTH_PARAMETERS}
    maximum = {b: float(np.max([r[b] for r in per_treatment.values()])) for b in WIDTH_PARAMETERS}
    logger.info(f"Reducción media de la anchura del CrI: pendiente {average['lambda1']:.0%}, "
                f"psi2 {average['psi2']:.0%}")
    return WidthReduction(per_treatment=per_treatment, average=average, minimum=minimum, maximum=maximum)
