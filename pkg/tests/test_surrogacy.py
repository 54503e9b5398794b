import numpy as np
import pytest
from scipy import stats

from config import McmcSettings, PriorConfig, SimDesign
from data_model import build_study_blocks, load_dataset
from errors import (
    InsufficientData, MissingCovariate, MixedOutcome, SingleTreatment, TreatmentMismatch, UnknownTreatment,
)
from models import Dataset, Outcome, PosteriorSummary
from scale_convert import harmonize_surrogate_scale
from simgen import simulate_dataset
from surrogacy import (
    HierarchicalPosterior, band_grid, evaluate_criteria, fit_hierarchical, fit_model, fit_pooled, fit_subgroup,
    pack_blocks, regression_band, width_reduction,
)


def _summary(name, lo, mid, hi, mean=None):
    return PosteriorSummary(name=name, mean=mid if mean is None else mean, sd=(hi - lo) / 4,
                            q2_5=lo, q50=mid, q97_5=hi)


class _FakePosterior:
    """Sustituto mínimo: solo resúmenes y nombres de parámetros."""

    def __init__(self, summaries, treatments=("all",), tagged=False):
        self.summaries = summaries
        self.treatments = list(treatments)
        self.tagged = tagged

    def summary(self, name):
        return self.summaries[name]

    def parameter_name(self, base, treatment=None):
        return f"{base}[{treatment}]" if self.tagged else base


def _single(intercept, slope, psi2):
    return _FakePosterior({
        "lambda0": _summary("lambda0", *intercept),
        "lambda1": _summary("lambda1", *slope),
        "psi2": _summary("psi2", *psi2),
    })


@pytest.fixture(scope="module")
def noiseless_fit():
    design = SimDesign(n_studies=30, arms=[2] * 30, lambda0=0.0, lambda1=1.0, psi2=0.0,
                       delta1_mean=-0.2, delta1_sd=0.2, se1_range=(0.01, 0.01), se2_range=(0.01, 0.01), seed=5)
    blocks = build_study_blocks(simulate_dataset(design))
    s = McmcSettings(iterations=3_000, burn_in=1_000, thin=5, chains=2, seed=13)
    return fit_pooled(blocks, PriorConfig(), s)


@pytest.fixture(scope="module")
def three_treatment_blocks():
    design = SimDesign(n_studies=12, arms=[2] * 10 + [3] * 2, treatments=["A", "B", "C"], psi2=0.01,
                       delta1_sd=0.2, seed=17)
    return build_study_blocks(simulate_dataset(design))


def test_noiseless_recovery(noiseless_fit):
    p = noiseless_fit

    assert p.summary("lambda0").mean == pytest.approx(0.0, abs=0.05)
    assert p.summary("lambda1").mean == pytest.approx(1.0, abs=0.05)
    assert p.summary("psi2").mean == pytest.approx(0.0, abs=0.05)
    assert evaluate_criteria(p, psi2_threshold=0.05).label == "supported"


def test_posterior_invariants(noiseless_fit):
    p = noiseless_fit

    assert np.all(p.draws("psi2") >= 0)
    np.testing.assert_allclose(p.draws("psi2"), p.draws("psi") ** 2)
    assert p.parameter_names[:4] == ["lambda0", "lambda1", "psi", "psi2"]
    assert sum(n.startswith("delta1[") for n in p.parameter_names) == 30
    assert p.diagnostics.n_chains == 2
    assert 0.1 <= p.diagnostics.acceptance["psi"][0] <= 0.6


def test_verdict_recomputable_from_summaries(noiseless_fit):
    p = noiseless_fit
    v = evaluate_criteria(p, 0.05)

    slope = p.summary("lambda1")
    assert v.slope_excludes_zero == (not slope.q2_5 <= 0 <= slope.q97_5)
    assert v.variance_below_threshold == (p.summary("psi2").q50 < 0.05)


def test_regression_band(noiseless_fit):
    grid = band_grid([-0.5, 0.1])
    rows = regression_band(noiseless_fit, grid)

    assert len(rows) == grid.size
    assert all(r.lo <= r.mean <= r.hi for r in rows)
    at_zero = next(r for r in rows if r.x == 0.0)
    assert at_zero.mean == pytest.approx(noiseless_fit.summary("lambda0").mean, abs=1e-9)
    assert {r.treatment for r in rows} == {"all"}


def test_band_grid_pads_range_and_includes_zero():
    grid = band_grid([-0.4, -0.1], points=31)

    assert grid.min() == pytest.approx(-0.43)
    assert 0.0 in grid
    assert np.all(np.diff(grid) > 0)


@pytest.mark.parametrize("intercept, slope, psi2, label", [
    ((-0.16, -0.03, 0.11), (0.60, 1.41, 2.21), (0.0, 0.02, 0.05), "supported"),
    ((0.05, 0.2, 0.4), (0.60, 1.41, 2.21), (0.0, 0.02, 0.05), "weak"),
    ((-0.16, -0.03, 0.11), (0.60, 1.41, 2.21), (0.01, 0.08, 0.3), "weak"),
    ((-0.16, -0.03, 0.11), (-1.48, 2.09, 5.54), (0.0, 0.05, 0.34), "not-supported"),
])
def test_criteria_labels(intercept, slope, psi2, label):
    assert evaluate_criteria(_single(intercept, slope, psi2), 0.05).label == label


def test_too_few_contrasts(make_contrast):
    d = Dataset(contrasts=(make_contrast(study_id="S1"), make_contrast(study_id="S2")))
    with pytest.raises(InsufficientData):
        fit_pooled(build_study_blocks(d), PriorConfig(), McmcSettings(iterations=300, burn_in=100, thin=1))


def test_mixed_outcomes_rejected(make_contrast):
    d = Dataset(contrasts=(
        make_contrast(study_id="S1"),
        make_contrast(study_id="S2"),
        make_contrast(study_id="S3", outcome=Outcome.MMSE),
    ))
    with pytest.raises(MixedOutcome):
        fit_pooled(build_study_blocks(d), PriorConfig(), McmcSettings(iterations=300, burn_in=100, thin=1))


def test_subgroup_unknown_treatment(three_treatment_blocks, fast_settings):
    with pytest.raises(UnknownTreatment):
        fit_subgroup(three_treatment_blocks, "Z", PriorConfig(), fast_settings)
    with pytest.raises(UnknownTreatment):
        fit_model(three_treatment_blocks, "subgroup", PriorConfig(), fast_settings)


def test_subgroup_fit_uses_only_its_contrasts(three_treatment_blocks, fast_settings):
    p = fit_subgroup(three_treatment_blocks, "A", PriorConfig(), fast_settings)

    assert p.scope == "subgroup:A"
    assert p.treatments == ["A"]
    keys = [n for n in p.parameter_names if n.startswith("delta1[")]
    assert len(keys) == sum(c.treatment == "A" for b in three_treatment_blocks for c in b.contrasts)


def test_hierarchical_needs_two_treatments():
    design = SimDesign(n_studies=5, arms=[2] * 5, seed=1)
    blocks = build_study_blocks(simulate_dataset(design))
    with pytest.raises(SingleTreatment):
        fit_hierarchical(blocks, "full", PriorConfig(), McmcSettings(iterations=300, burn_in=100, thin=1))


def _mcse(summary):
    return summary.sd / np.sqrt(summary.ess)


def test_pooled_fit_matches_closed_form_with_fixed_psi(make_contrast):
    # Con psi fijo y se1 despreciable, la posterior de (lambda0, lambda1) es la de una
    # regresión ponderada con a priori normal: media y covarianza exactas.
    n, psi = 20, 0.1
    rng = np.random.default_rng(8)
    y1 = np.linspace(-0.5, 0.0, n)
    se2 = np.linspace(0.1, 0.3, n)
    y2 = 0.1 + 1.3 * y1 + rng.normal(0.0, np.sqrt(se2 ** 2 + psi ** 2))
    d = Dataset(contrasts=tuple(
        make_contrast(study_id=f"S{i + 1}", y1=float(y1[i]), se1=1e-4, y2=float(y2[i]), se2=float(se2[i]))
        for i in range(n)
    ))
    priors = PriorConfig(psi_prior="fixed", psi_fixed=psi)
    s = McmcSettings(iterations=12_000, burn_in=2_000, thin=1, chains=2, seed=3)

    p = fit_pooled(build_study_blocks(d), priors, s)

    x = np.column_stack([np.ones(n), y1])
    w = 1.0 / (se2 ** 2 + psi ** 2)
    cov = np.linalg.inv(x.T @ (w[:, None] * x) + np.eye(2) / priors.coefficient_sd ** 2)
    mean = cov @ x.T @ (w * y2)
    for i, name in enumerate(("lambda0", "lambda1")):
        summary = p.summary(name)
        assert abs(summary.mean - mean[i]) < 3 * _mcse(summary), name
        assert summary.sd == pytest.approx(np.sqrt(cov[i, i]), rel=0.05), name


def test_tiny_hyper_sd_collapses_onto_pooled_fit(three_treatment_blocks):
    s = McmcSettings(iterations=4_000, burn_in=1_000, thin=3, chains=2, seed=7)
    pooled = fit_pooled(three_treatment_blocks, PriorConfig(), s)
    tight = PriorConfig(hyper_sd_scale=1e-3, psi_structure="common")
    hier = fit_hierarchical(three_treatment_blocks, "full", tight, s)

    for base in ("lambda0", "lambda1"):
        shared = pooled.summary(base)
        for t in "ABC":
            own = hier.summary(f"{base}[{t}]")
            tol = 3 * np.hypot(_mcse(shared), _mcse(own)) + 0.01
            assert own.mean == pytest.approx(shared.mean, abs=tol), f"{base}[{t}]"
        spread = hier.draws(f"{base}[A]") - hier.draws(f"{base}[B]")
        assert spread.std() < 0.01


def test_full_exchangeability_fit(three_treatment_blocks, fast_settings):
    p = fit_hierarchical(three_treatment_blocks, "full", PriorConfig(), fast_settings)

    assert isinstance(p, HierarchicalPosterior)
    assert p.scope == "hierarchical:full"
    for name in ("lambda0[A]", "lambda1[C]", "psi2[B]", "b0", "b1", "t0", "t1", "b_psi", "t_psi"):
        assert name in p.summaries
    for t in ("t0", "t1", "t_psi"):
        assert np.all(p.draws(t) > 0)
    assert np.all(p.draws("psi2[A]") >= 0)
    assert p.mixture_weights == {}
    assert p.parameter_name("lambda1", "B") == "lambda1[B]"
    with pytest.raises(UnknownTreatment):
        p.parameter_name("lambda1", "Z")
    assert [r.treatment for r in regression_band(p, [0.0, -0.2], "B")] == ["B", "B"]


def test_partial_exchangeability_weights(three_treatment_blocks, fast_settings):
    p = fit_hierarchical(three_treatment_blocks, "partial", PriorConfig(), fast_settings)

    weights = p.mixture_weights
    assert set(weights) == {"A", "B", "C"}
    for t in "ABC":
        w = p.draws(f"w[{t}]")
        assert np.all((w >= 0) & (w <= 1))
    assert evaluate_criteria(p, 0.05, "A").label in ("supported", "weak", "not-supported")


def test_common_psi_structure(three_treatment_blocks, fast_settings):
    priors = PriorConfig(psi_structure="common")
    p = fit_hierarchical(three_treatment_blocks, "full", priors, fast_settings)

    assert "psi2" in p.summaries and "psi2[A]" not in p.summaries
    assert "b_psi" not in p.summaries
    assert p.parameter_name("psi2", "A") == "psi2"


def test_fixed_psi_is_constant(three_treatment_blocks, fast_settings):
    priors = PriorConfig(psi_prior="fixed", psi_fixed=0.1)
    p = fit_pooled(three_treatment_blocks, priors, fast_settings)

    np.testing.assert_allclose(p.draws("psi"), 0.1)
    assert {"psi", "psi2"} <= set(p.diagnostics.degenerate)


def test_covariate_is_centred(fixture_csv):
    d = harmonize_surrogate_scale(load_dataset(fixture_csv), "SUVR")
    blocks = build_study_blocks(d)

    design = pack_blocks(blocks, covariate="aria")
    aria = [c.aria_effect for c in d.contrasts]
    assert design.covariate_center == pytest.approx(np.mean(aria))
    assert design.x[design.contrast_mask].mean() == pytest.approx(0.0, abs=1e-12)
    assert design.k_max == 5
    assert design.y.shape == (23, 10)


def test_missing_covariate(make_contrast):
    d = Dataset(contrasts=(make_contrast(study_id="S1", apoe_prop=0.6), make_contrast(study_id="S2")))
    with pytest.raises(MissingCovariate) as exc:
        pack_blocks(build_study_blocks(d), covariate="apoe")
    assert exc.value.keys == ["S2/C1"]


def test_held_out_outcome_is_masked(three_treatment_blocks):
    blocks = [three_treatment_blocks[0].hold_out_outcome()] + list(three_treatment_blocks[1:])

    design = pack_blocks(blocks)
    assert design.mask[0, 1] == 0.0
    assert design.mask[0, 0] == 1.0
    full = pack_blocks(three_treatment_blocks)
    assert design.n_observed_final == full.n_observed_final - three_treatment_blocks[0].size


def test_width_reduction_from_summaries():
    sub = {
        t: _FakePosterior({
            "lambda0": _summary("lambda0", -1.0, 0.0, 1.0),
            "lambda1": _summary("lambda1", -2.0, 1.0, 4.0),
            "psi2": _summary("psi2", 0.0, 0.1, 0.5),
        }, treatments=[t])
        for t in ("A", "B")
    }
    hier = _FakePosterior({
        **{f"lambda0[{t}]": _summary("lambda0", -0.5, 0.0, 0.5) for t in "AB"},
        "lambda1[A]": _summary("lambda1", 0.0, 1.0, 3.0),
        "lambda1[B]": _summary("lambda1", -1.0, 1.0, 2.0),
        **{f"psi2[{t}]": _summary("psi2", 0.0, 0.1, 0.4) for t in "AB"},
    }, treatments=["A", "B"], tagged=True)

    w = width_reduction(sub, hier)
    assert w.per_treatment["A"]["lambda1"] == pytest.approx(0.5)
    assert w.per_treatment["B"]["lambda1"] == pytest.approx(0.5)
    assert w.average["lambda0"] == pytest.approx(0.5)
    assert w.average["psi2"] == pytest.approx(0.2)
    assert w.minimum["lambda1"] <= w.average["lambda1"] <= w.maximum["lambda1"]


def test_width_reduction_requires_same_treatments():
    hier = _FakePosterior({}, treatments=["A", "B"], tagged=True)
    with pytest.raises(TreatmentMismatch):
        width_reduction({"A": _FakePosterior({})}, hier)


SEVEN_TREATMENTS = [f"T{j}" for j in range(7)]


@pytest.fixture(scope="module")
def seven_treatment_fits():
    """Ajuste jerárquico completo y por subgrupo sobre 35 estudios con pendientes dispersas."""
    design = SimDesign(
        n_studies=35, arms=[2] * 28 + [3] * 7, treatments=SEVEN_TREATMENTS, lambda0=0.0, lambda1=1.0, psi2=0.01,
        delta1_mean=-0.2, delta1_sd=0.15,
        perturbations={t: (0.0, 0.1 * (j - 3)) for j, t in enumerate(SEVEN_TREATMENTS)}, seed=23,
    )
    blocks = build_study_blocks(simulate_dataset(design))
    s = McmcSettings(iterations=20_000, burn_in=10_000, thin=10, chains=2, seed=29)
    priors = PriorConfig()
    hier = fit_hierarchical(blocks, "full", priors, s)
    subgroups = {t: fit_subgroup(blocks, t, priors, s) for t in SEVEN_TREATMENTS}
    return hier, subgroups


@pytest.mark.slow
def test_hierarchical_fit_shrinks_subgroup_intervals(seven_treatment_fits):
    hier, subgroups = seven_treatment_fits
    w = width_reduction(subgroups, hier)

    narrower = [w.per_treatment[t]["lambda1"] > 0 for t in SEVEN_TREATMENTS]
    assert np.mean(narrower) >= 0.9
    assert w.average["lambda1"] > 0
    assert w.average["psi2"] > 0


@pytest.mark.slow
def test_hierarchical_means_lie_between_subgroup_and_hypermean(seven_treatment_fits):
    hier, subgroups = seven_treatment_fits

    between = []
    for base, hyper_name in (("lambda0", "b0"), ("lambda1", "b1")):
        hyper = hier.summary(hyper_name)
        for t in SEVEN_TREATMENTS:
            sub, own = subgroups[t].summary(base), hier.summary(f"{base}[{t}]")
            tol = 3 * np.sqrt(_mcse(sub) ** 2 + _mcse(own) ** 2 + _mcse(hyper) ** 2)
            lo, hi = sorted((sub.mean, hyper.mean))
            between.append(lo - tol <= own.mean <= hi + tol)
    assert np.mean(between) >= 0.9


@pytest.mark.slow
def test_surrogate_rescaling_rescales_slope():
    design = SimDesign(n_studies=20, arms=[2] * 20, lambda0=0.0, lambda1=1.4, psi2=0.02, seed=31)
    d = simulate_dataset(design)
    c = 183.0
    scaled = d.model_copy(update={"contrasts": tuple(
        x.model_copy(update={"y1": x.y1 * c, "se1": x.se1 * c}) for x in d.contrasts)})
    s = McmcSettings(iterations=50_000, burn_in=10_000, thin=5, chains=2, seed=37)
    priors = PriorConfig(delta1_sd=1e5, coefficient_sd=1e5)

    base = fit_pooled(build_study_blocks(d), priors, s)
    rescaled = fit_pooled(build_study_blocks(scaled), priors, s)

    slope, slope_scaled = base.draws("lambda1"), rescaled.draws("lambda1") * c
    assert slope_scaled.mean() == pytest.approx(slope.mean(), rel=0.05)
    assert stats.ks_2samp(slope, slope_scaled).statistic < 0.05
    assert rescaled.summary("psi2").q50 == pytest.approx(base.summary("psi2").q50, abs=0.01)
    assert rescaled.summary("lambda0").mean == pytest.approx(base.summary("lambda0").mean, abs=0.05)


@pytest.mark.slow
def test_final_outcome_shift_moves_intercept_only():
    design = SimDesign(n_studies=20, arms=[2] * 20, lambda0=0.0, lambda1=1.4, psi2=0.02, seed=41)
    d = simulate_dataset(design)
    shifted = d.model_copy(update={"contrasts": tuple(x.model_copy(update={"y2": x.y2 + 0.5}) for x in d.contrasts)})
    s = McmcSettings(iterations=30_000, burn_in=10_000, thin=10, chains=2, seed=43)
    priors = PriorConfig(coefficient_sd=1e5)

    base = fit_pooled(build_study_blocks(d), priors, s)
    moved = fit_pooled(build_study_blocks(shifted), priors, s)

    assert moved.summary("lambda0").mean - base.summary("lambda0").mean == pytest.approx(0.5, abs=0.03)
    assert moved.summary("lambda1").mean == pytest.approx(base.summary("lambda1").mean, abs=0.05)
    assert moved.summary("psi2").q50 == pytest.approx(base.summary("psi2").q50, abs=0.01)
