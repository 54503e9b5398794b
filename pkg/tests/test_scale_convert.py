import pytest

from data_model import load_dataset
from errors import UnknownTracer
from models import Dataset, SurrogateScale, Tracer
from scale_convert import (
    centiloid_delta_from_suvr, effective_slope, harmonize_surrogate_scale, suvr_delta_from_centiloid,
)


def test_single_tracer_slope():
    assert effective_slope([Tracer.FLORBETAPIR]) == 183.0


def test_mixed_tracers_average_slopes():
    assert effective_slope([Tracer.FLORBETAPIR, Tracer.FLORBETABEN]) == pytest.approx((183.0 + 153.4) / 2)


def test_suvr_to_centiloid_scales_effect_and_se():
    d, se = centiloid_delta_from_suvr([Tracer.FLORBETAPIR], -0.3, 0.05)
    assert d == pytest.approx(-54.9)
    assert se == pytest.approx(9.15)


def test_centiloid_to_suvr_inverts():
    d, se = suvr_delta_from_centiloid([Tracer.FLORBETAPIR], -54.9, 9.15)
    assert d == pytest.approx(-0.3)
    assert se == pytest.approx(0.05)


@pytest.mark.parametrize("tracers", [[], [Tracer.OTHER], [Tracer.FLORBETAPIR, Tracer.OTHER]])
def test_unknown_tracer(tracers):
    with pytest.raises(UnknownTracer):
        effective_slope(tracers)


def test_harmonize_marks_converted_rows(fixture_csv):
    d = load_dataset(fixture_csv)

    out = harmonize_surrogate_scale(d, SurrogateScale.SUVR)
    assert {c.surrogate_scale for c in out.contrasts} == {SurrogateScale.SUVR}
    imputed = [c for c in out.contrasts if c.imputed_scale]
    assert sorted(c.study_id for c in imputed) == ["FX09", "FX10", "FX11", "FX12", "FX13", "FX14"]
    fx09 = next(c for c in imputed if c.study_id == "FX09")
    assert fx09.y1 == pytest.approx(-0.3)
    assert fx09.se1 == pytest.approx(0.05)
    # La entrada no se modifica.
    assert sum(c.imputed_scale for c in d.contrasts) == 0


def test_harmonize_is_idempotent(fixture_csv):
    once = harmonize_surrogate_scale(load_dataset(fixture_csv), SurrogateScale.SUVR)
    twice = harmonize_surrogate_scale(once, SurrogateScale.SUVR)
    assert twice.contrasts == once.contrasts


def test_harmonize_reports_blocked_studies(make_contrast):
    d = Dataset(contrasts=(
        make_contrast(study_id="S1"),
        make_contrast(study_id="S2", surrogate_scale=SurrogateScale.CENTILOID, tracers=frozenset({Tracer.OTHER})),
    ))
    with pytest.raises(UnknownTracer) as exc:
        harmonize_surrogate_scale(d, SurrogateScale.SUVR)
    assert exc.value.study_ids == ["S2"]
