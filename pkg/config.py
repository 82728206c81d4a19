import logging
import os
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError

from errors import ConfigError

# Load environment variables
load_dotenv()

ENV_PREFIX = "BP_"


class Settings(BaseModel):
    """Numeric tolerances and runtime knobs shared by the solver, verifier and front-ends."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    tol_mart: float = 1e-9
    tol_opt: float = 1e-9
    tol_foc: float = 1e-8
    tol_minimality: float = 1e-9
    ode_steps: int = 2000
    dp_alternations: int = 5
    audit_points: int = 41
    competitor_points: int = 11
    competitor_kappas: int = 5
    random_competitors: int = 8
    g_starts: int = 5
    max_oracle_combos: int = 10**6
    pg_max_iter: int = 20000
    unbounded_norm: float = 1e8
    log_level: str = "INFO"
    api_host: str = "0.0.0.0"
    api_port: int = 8000

    def with_overrides(self, overrides: Mapping[str, Any]) -> "Settings":
        """Return a copy with some fields replaced; unknown names raise ConfigError."""
        unknown = sorted(set(overrides) - set(type(self).model_fields))
        if unknown:
            raise ConfigError(f"Unknown setting(s): {', '.join(unknown)}")
        try:
            return type(self).model_validate({**self.model_dump(), **dict(overrides)})
        except ValidationError as e:
            raise ConfigError(str(e)) from e


def load_settings(environ: Optional[Mapping[str, str]] = None) -> Settings:
    """
    Build Settings from BP_* environment variables (a .env file is honoured).

    Args:
        environ: Mapping to read instead of os.environ (used by tests)

    Returns:
        Validated Settings
    """
    environ = os.environ if environ is None else environ
    values: Dict[str, str] = {}
    for name in Settings.model_fields:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            values[name] = environ[key]
    try:
        return Settings.model_validate(values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def configure_logging(level: str = "INFO") -> None:
    """Install a single stream handler on the root logger."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
