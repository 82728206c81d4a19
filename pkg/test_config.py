import pytest
from pydantic import ValidationError

from config import Settings, load_settings
from errors import ConfigError


def test_defaults():
    settings = Settings()
    assert settings.tol_mart == 1e-9
    assert settings.tol_foc == 1e-8
    assert settings.ode_steps == 2000
    assert settings.max_oracle_combos == 10**6


def test_with_overrides_returns_new_copy():
    settings = Settings()
    looser = settings.with_overrides({"tol_mart": "1e-7", "ode_steps": 50})
    assert looser.tol_mart == 1e-7
    assert looser.ode_steps == 50
    assert settings.tol_mart == 1e-9


def test_settings_are_frozen():
    with pytest.raises(ValidationError):
        Settings().tol_mart = 1.0


@pytest.mark.parametrize("overrides", [{"tol_nonsense": 1.0}, {"ode_steps": "many"}])
def test_bad_overrides(overrides):
    with pytest.raises(ConfigError):
        Settings().with_overrides(overrides)


def test_load_settings_from_environment():
    settings = load_settings({"BP_TOL_MART": "1e-7", "BP_ODE_STEPS": "100", "UNRELATED": "x"})
    assert settings.tol_mart == 1e-7
    assert settings.ode_steps == 100


def test_load_settings_rejects_ill_typed_values():
    with pytest.raises(ConfigError):
        load_settings({"BP_ODE_STEPS": "lots"})
