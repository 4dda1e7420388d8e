"""
Shared pytest fixtures and configuration for all tests.
"""
import pytest
from pathlib import Path

from longidesign.model.schema import (CompoundSymmetry, DampedExponential, DesignQuery, LddEffect,
                                      CmdEffect, PopulationSpec, RandomSlopes, RsRawParams, TimeGrid)


@pytest.fixture(scope="session")
def project_root():
    """Return the project root directory."""
    return Path(__file__).parent.parent


@pytest.fixture(scope="session")
def config_dir(project_root):
    """Return the config directory."""
    return project_root / "config"


@pytest.fixture(scope="session")
def scenario_dir(config_dir):
    """Return the directory of shipped scenario files."""
    return config_dir / "scenarios"


@pytest.fixture
def temp_output_dir(tmp_path):
    """Create a temporary output directory for tests."""
    output_dir = tmp_path / "output"
    output_dir.mkdir(exist_ok=True)
    return output_dir


@pytest.fixture
def pilot_cs():
    return CompoundSymmetry(sigma2=0.3214, rho=0.857)


@pytest.fixture
def pilot_dex():
    return DampedExponential(sigma2=0.3179, rho=0.896, theta=0.18)


@pytest.fixture
def pilot_rs_raw():
    return RsRawParams(sigma_w2=0.0418, sigma_b0_2=0.2982, sigma_b1_2=0.000095, sigma_b0b1=-0.0017)


@pytest.fixture
def pilot_rs(pilot_rs_raw):
    return RandomSlopes(params=pilot_rs_raw)


@pytest.fixture
def make_query():
    """Factory for design queries around the pilot effect sizes."""
    def _make(cov, hyp="ldd", r=6, mode="fixed_s", horizon=3.0, pe=0.79, v_t0=0.0, rho_e_t0=0.0,
              effect=None):
        if effect is None:
            effect = (CmdEffect(p1=0.1, mu00=3.5086) if hyp == "cmd"
                      else LddEffect(p2=-0.182, p3=0.1, mu00=3.5086))
        return DesignQuery(grid=TimeGrid(r=r, mode=mode, horizon=horizon),
                           pop=PopulationSpec(pe=pe, v_t0=v_t0, rho_e_t0=rho_e_t0),
                           cov=cov, hyp=hyp, effect=effect)
    return _make
