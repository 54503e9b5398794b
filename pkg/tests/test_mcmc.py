import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
import pytest

from config import McmcSettings
from errors import DivergentChain, InitOutOfSupport, UnknownParameter
from mcmc import (
    Chain, MetropolisBlock, diagnostics, draws_for, dump_draws, effective_sample_size, pooled_draws, run_chains,
    split_rhat, summarize, summarize_draws,
)


@dataclass
class _Scalar:
    x: float


class _ScalarModel:
    """Un único parámetro actualizado con Metropolis."""
    parameter_names = ["x"]

    def __init__(self, log_target, transform="identity"):
        self._log_target = log_target
        self.transform = transform

    def gibbs_step(self, state, rng):
        pass

    def metropolis_blocks(self):
        return [MetropolisBlock(name="x", get=lambda s: s.x, set=lambda s, v: setattr(s, "x", v),
                                log_target=self.log_density, transform=self.transform, initial_step=1.0)]

    def log_density(self, state):
        return self._log_target(state.x)

    def flatten(self, state):
        return np.array([state.x])


class _ExactModel:
    """Solo Gibbs: cada iteración extrae de Normal(2, 0.5) exactamente."""
    parameter_names = ["x"]

    def gibbs_step(self, state, rng):
        state.x = 2.0 + 0.5 * rng.standard_normal()

    def metropolis_blocks(self):
        return []

    def log_density(self, state):
        return 0.0

    def flatten(self, state):
        return np.array([state.x])


def _normal_mean_posterior(mu):
    # y = 1 con sigma = 1 y prior Normal(0, 10^6)
    return -0.5 * (1.0 - mu) ** 2 - 0.5 * mu ** 2 / 1e6


def _gamma_log_density(x):
    if x <= 0:
        return -math.inf
    return 2.0 * math.log(x) - 2.0 * x


def _chain(values, name="a", index=0):
    values = np.asarray(values, dtype=float)
    return Chain(parameter_names=[name], draws=values[:, None], iterations=np.arange(1, values.size + 1),
                 chain_index=index)


def test_normal_mean_matches_conjugate_posterior():
    s = McmcSettings(iterations=22_000, burn_in=2_000, thin=1, chains=2, seed=3)
    model = _ScalarModel(_normal_mean_posterior)

    chains = run_chains(model, [_Scalar(0.0), _Scalar(3.0)], s)
    draws = pooled_draws(chains, "x")
    assert draws.size == 40_000
    assert draws.mean() == pytest.approx(1.0, abs=0.05)
    assert draws.std() == pytest.approx(1.0, abs=0.05)
    for ch in chains:
        assert 0.1 <= ch.acceptance["x"] <= 0.6


def test_log_scale_block_includes_jacobian():
    s = McmcSettings(iterations=22_000, burn_in=2_000, thin=1, chains=2, seed=8)
    model = _ScalarModel(_gamma_log_density, transform="log")

    draws = pooled_draws(run_chains(model, [_Scalar(1.0), _Scalar(2.0)], s), "x")
    assert np.all(draws > 0)
    # Gamma(forma 3, tasa 2): media 1.5, DE sqrt(3)/2
    assert draws.mean() == pytest.approx(1.5, abs=0.05)
    assert draws.std() == pytest.approx(math.sqrt(3) / 2, abs=0.05)


def test_results_independent_of_workers():
    s = McmcSettings(iterations=600, burn_in=100, thin=5, chains=3, seed=21)
    model = _ScalarModel(_normal_mean_posterior)
    inits = [_Scalar(0.0)] * 3

    serial = run_chains(model, inits, s)
    threaded = run_chains(model, inits, s.model_copy(update={"workers": 3}))
    for a, b in zip(serial, threaded):
        np.testing.assert_array_equal(a.draws, b.draws)
    assert inits[0].x == 0.0


def test_gibbs_only_model_and_thinning():
    s = McmcSettings(iterations=1_500, burn_in=500, thin=10, chains=1, seed=2)

    [ch] = run_chains(_ExactModel(), [_Scalar(0.0)], s)
    assert ch.draws.shape == (100, 1)
    assert list(ch.iterations[:3]) == [510, 520, 530]
    assert ch.acceptance == {}


def test_init_out_of_support():
    s = McmcSettings(iterations=300, burn_in=100, thin=1, chains=1)
    with pytest.raises(InitOutOfSupport):
        run_chains(_ScalarModel(_gamma_log_density, transform="log"), [_Scalar(-1.0)], s)


def test_nan_target_is_divergence():
    s = McmcSettings(iterations=300, burn_in=100, thin=1, chains=1)
    model = _ScalarModel(lambda x: 0.0 if x == 0.5 else math.nan)
    with pytest.raises(DivergentChain):
        run_chains(model, [_Scalar(0.5)], s)


def test_settings_require_100_retained_draws():
    with pytest.raises(ValueError):
        McmcSettings(iterations=1_000, burn_in=500, thin=10)


def test_ess_of_white_noise():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5_000))

    ess = effective_sample_size(x)
    assert 0.8 * x.size <= ess <= x.size


def test_ess_of_autocorrelated_chain():
    rng = np.random.default_rng(1)
    phi, n = 0.9, 10_000
    x = np.zeros((2, n))
    for t in range(1, n):
        x[:, t] = phi * x[:, t - 1] + rng.standard_normal(2)

    expected = 2 * n * (1 - phi) / (1 + phi)
    assert 0.6 * expected <= effective_sample_size(x) <= 1.5 * expected


def test_rhat_detects_separated_chains():
    rng = np.random.default_rng(4)
    mixed = rng.standard_normal((2, 1_000))
    separated = mixed + np.array([[0.0], [3.0]])

    assert split_rhat(mixed) == pytest.approx(1.0, abs=0.01)
    assert split_rhat(separated) > 1.5


def test_diagnostics_flag_constant_parameter():
    rng = np.random.default_rng(5)
    chains = [
        Chain(parameter_names=["a", "b"], draws=np.column_stack([rng.standard_normal(200), np.ones(200)]),
              iterations=np.arange(200), chain_index=i)
        for i in range(2)
    ]

    report = diagnostics(chains)
    assert report.degenerate == ["b"]
    assert report.parameters["b"].ess is None
    assert 0 < report.parameters["a"].ess <= 400
    assert report.parameters["a"].rhat == pytest.approx(1.0, abs=0.05)
    assert len(report.parameters["a"].autocorrelation) == 50


def test_single_chain_has_no_rhat():
    report = diagnostics([_chain(np.random.default_rng(6).standard_normal(300))])
    assert report.parameters["a"].rhat is None


def test_diagnostics_need_100_draws():
    with pytest.raises(ValueError):
        diagnostics([_chain(np.zeros(50))])


def test_summary_quantiles_of_standard_normal():
    draws = np.random.default_rng(7).standard_normal(100_000)

    s = summarize_draws("z", draws)
    assert s.q97_5 == pytest.approx(1.96, abs=0.03)
    assert s.q2_5 == pytest.approx(-1.96, abs=0.03)
    assert s.mean == pytest.approx(0.0, abs=0.02)


def test_summarize_unknown_parameter():
    with pytest.raises(UnknownParameter):
        summarize([_chain(np.zeros(200))], "missing")


def test_draws_for_shape():
    chains = [_chain(np.arange(200.0), index=0), _chain(np.arange(200.0), index=1)]
    assert draws_for(chains, "a").shape == (2, 200)


def test_dump_draws(tmp_path):
    chains = [_chain(np.linspace(0, 1, 120), index=0), _chain(np.linspace(1, 2, 120), index=1)]

    paths = dump_draws(chains, tmp_path)
    assert [p.name for p in paths] == ["draws_chain0.csv", "draws_chain1.csv"]
    df = pd.read_csv(paths[1])
    assert list(df.columns) == ["iteration", "a"]
    assert df["a"].iloc[-1] == pytest.approx(2.0)
