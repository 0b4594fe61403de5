"""
Application configuration using pydantic-settings.

Precedence: command-line flag > config file > environment (BNER_*) > default.
The config file is dotenv-style ``key=value`` text; keys are setting names,
with or without the ``BNER_`` prefix.
"""

import os
from typing import Literal, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings

from app.errors import BnerError
from app.models import BootstrapOptions, FitOptions, McOptions
from app.utils import default_threads


ENV_PREFIX = "BNER_"

Command = Literal["fit", "predict", "mse", "sim1", "sim2", "serve"]


class ConfigError(BnerError):
    """Unreadable config file or unknown setting."""
    pass


class Settings(BaseSettings):
    """Run defaults loaded from environment variables."""

    # Estimation
    transform: Literal["identity", "log"] = "log"
    targets: str = "mean1,mean2,mean_of_ratios,ratio_of_means"
    L: int = 200
    B: int = 400
    seed: int = 0
    antithetic: bool = False
    refit: bool = True
    chunk_elements: int = 2_000_000

    # REML
    max_iterations: int = 200
    rel_tolerance: float = 1e-8
    step_halving_max: int = 10

    # Simulation
    sim_D: int = 50
    sim_N_d: int = 200
    sim_n: str = ""  # empty = per-command default
    sim_I: int = 200
    B_grid: str = "50,100,200,300,400"

    # Runtime
    threads: int = 0  # 0 = available parallelism
    out: str = "out"
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = "INFO"

    # HTTP service
    allowed_origins: str = "*"
    max_upload_mb: int = 50

    @field_validator("log_level", mode="before")
    @classmethod
    def _upper_level(cls, value):
        return value.upper() if isinstance(value, str) else value

    class Config:
        env_prefix = ENV_PREFIX
        case_sensitive = False


def read_config_file(path: str) -> dict[str, str]:
    """Setting values from a key=value file, keyed by setting name."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    names = {name.lower(): name for name in Settings.model_fields}
    values = {}
    for key, value in dotenv_values(path).items():
        normalized = key.strip().lower()
        if normalized.startswith(ENV_PREFIX.lower()):
            normalized = normalized[len(ENV_PREFIX):]
        if normalized not in names:
            raise ConfigError(f"{path}: unknown setting '{key}'")
        if value is not None:
            values[names[normalized]] = value
    return values


def load_settings(config_file: Optional[str] = None, overrides: Optional[dict] = None) -> Settings:
    """Resolve settings with flag > file > environment > default precedence."""
    values = read_config_file(config_file) if config_file else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return Settings(**values)


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in str(text).split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of integers, got '{text}'") from exc


class RunConfig(BaseModel):
    """One CLI invocation: command, inputs and every option it needs."""

    model_config = ConfigDict(frozen=True)

    command: Command
    data: Optional[str] = None
    aux: Optional[str] = None
    patterns: Optional[str] = None
    population: Optional[str] = None
    transform: Literal["identity", "log"] = "log"
    targets: list[str] = Field(default_factory=lambda: ["mean1", "mean2", "mean_of_ratios", "ratio_of_means"])
    L: int = Field(200, ge=1)
    B: int = Field(400, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    antithetic: bool = False
    refit: bool = True
    chunk_elements: int = Field(2_000_000, ge=2)
    threads: int = Field(1, ge=1)
    out: str = "out"
    fit: FitOptions = FitOptions()
    sim_D: int = Field(50, ge=1)
    sim_N_d: int = Field(200, ge=1)
    sim_n: list[int] = Field(default_factory=list)
    sim_I: int = Field(200, ge=1)
    B_grid: list[int] = Field(default_factory=lambda: [50, 100, 200, 300, 400])

    @model_validator(mode="after")
    def _check_inputs(self):
        if self.command in ("fit", "predict", "mse"):
            if not self.data:
                raise ValueError(f"'{self.command}' needs --data")
            paths = [self.data]
            if self.command != "fit":
                if self.population:
                    paths.append(self.population)
                elif self.aux and self.patterns:
                    paths += [self.aux, self.patterns]
                else:
                    raise ValueError(f"'{self.command}' needs --aux and --patterns, or --population")
            for path in paths:
                if not os.path.isfile(path):
                    raise ValueError(f"input file not found: {path}")
        return self

    @property
    def mc(self) -> McOptions:
        return McOptions(L=self.L, seed=self.seed, antithetic=self.antithetic, chunk_elements=self.chunk_elements)

    @property
    def bootstrap(self) -> BootstrapOptions:
        return BootstrapOptions(
            B=self.B,
            L=self.L,
            seed=self.seed,
            refit=self.refit,
            antithetic=self.antithetic,
            threads=self.threads,
            fit=self.fit,
        )

    @classmethod
    def from_settings(cls, command: str, settings: Settings, **paths) -> "RunConfig":
        return cls(
            command=command,
            transform=settings.transform,
            targets=[t.strip() for t in settings.targets.split(",") if t.strip()],
            L=settings.L,
            B=settings.B,
            seed=settings.seed,
            antithetic=settings.antithetic,
            refit=settings.refit,
            chunk_elements=settings.chunk_elements,
            threads=settings.threads or default_threads(),
            out=settings.out,
            fit=FitOptions(
                max_iterations=settings.max_iterations,
                rel_tolerance=settings.rel_tolerance,
                step_halving_max=settings.step_halving_max,
            ),
            sim_D=settings.sim_D,
            sim_N_d=settings.sim_N_d,
            sim_n=parse_int_list(settings.sim_n),
            sim_I=settings.sim_I,
            B_grid=parse_int_list(settings.B_grid),
            **paths,
        )


settings = Settings()
