"""Environment variable configuration management.

This module provides a centralized interface for loading and accessing
runtime knobs from environment variables. It uses Pydantic for type
validation and automatic loading from .env files. Physics and scenario
parameters do not live here; they are read from the scenario TOML file.
"""

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Configs(BaseSettings):
    """Runtime settings loaded from environment variables.

    All variables use the ``MCVD_`` prefix, e.g. ``MCVD_MAX_WORKERS=8``.

    Attributes
    ----------
    max_workers : int, default=1
        Number of worker threads used for fan-out over repetitions, bursts and
        grid cells. Outputs do not depend on this value.
    molecule_batch_size : int, default=2048
        Molecules per independent RNG stream. Changing it changes the random
        draws, so it is part of every manifest.
    chunk_steps : int, default=256
        Micro steps generated at once per tracking chunk. Only affects memory
        and speed. The random stream layout depends on it, so it is echoed in
        every manifest.
    coefficient_stderr_tolerance : float, default=5e-3
        Monte Carlo standard error above which a coefficient estimate is
        flagged in the result metadata.
    discretization_tolerance : float, default=2.0
        Allowed change of p_0 under micro step halving, in standard errors.
    output_dir : str, default='outputs'
        Default directory for command outputs.
    log_level : str, default='INFO'
        Root logging level.

    Examples
    --------
    >>> from src.utils.env_vars import Configs
    >>> configs = Configs()
    >>> print(configs.max_workers)
    1
    """

    model_config = SettingsConfigDict(
        env_prefix="MCVD_",
        env_file=".env",
        env_file_encoding="utf-8",
        env_ignore_empty=True,
        extra="ignore",
    )

    max_workers: int = Field(default=1, ge=1)
    molecule_batch_size: int = Field(default=2048, ge=1)
    chunk_steps: int = Field(default=256, ge=1)
    coefficient_stderr_tolerance: float = Field(default=5e-3, gt=0)
    discretization_tolerance: float = Field(default=2.0, gt=0)
    output_dir: str = "outputs"
    log_level: str = "INFO"
