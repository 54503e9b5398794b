from pathlib import Path

import pytest

from config import McmcSettings, PriorConfig, SimDesign
from models import Outcome, SurrogateScale, Tracer, TrialContrast

FIXTURE_CSV = Path(__file__).resolve().parent.parent / "data" / "reference_network_fixture.csv"


@pytest.fixture
def fixture_csv() -> Path:
    return FIXTURE_CSV


@pytest.fixture
def fast_settings() -> McmcSettings:
    """Cadenas cortas: 200 extracciones retenidas por cadena."""
    return McmcSettings(iterations=1200, burn_in=600, thin=3, chains=2, seed=11, adapt_window=50)


@pytest.fixture
def vague_priors() -> PriorConfig:
    return PriorConfig()


@pytest.fixture
def make_contrast():
    def _make(*, study_id: str = "S1", contrast_id: str = "C1", treatment: str = "A", y1: float = -0.2,
              se1: float = 0.05, y2: float = -0.3, se2: float = 0.2, **extra) -> TrialContrast:
        fields = dict(
            study_id=study_id, treatment=treatment, contrast_id=contrast_id,
            y1=y1, se1=se1, surrogate_scale=SurrogateScale.SUVR, tracers=frozenset({Tracer.FLORBETAPIR}),
            t_surrogate=78.0, y2=y2, se2=se2, outcome=Outcome.CDR_SOB, t_final=78.0, n_final=300,
        )
        fields.update(extra)
        return TrialContrast(**fields)
    return _make


@pytest.fixture
def noiseless_design() -> SimDesign:
    """30 contrastes de dos brazos con lambda0=0, lambda1=1, psi2=0 y errores estándar de 0.01."""
    return SimDesign(
        n_studies=30, arms=[2] * 30, lambda0=0.0, lambda1=1.0, psi2=0.0,
        delta1_mean=-0.2, delta1_sd=0.2, se1_range=(0.01, 0.01), se2_range=(0.01, 0.01), seed=5,
    )
