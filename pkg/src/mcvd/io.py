"""Reading and writing of result files.

CSV files are written with ``%.12g`` floats and ``\\n`` line endings; JSON
files with sorted keys. No output carries a timestamp, so reruns with the same
spec and seed reproduce files byte for byte.
"""

import json
from pathlib import Path
from typing import Any

import pandas as pd
import pydantic

from src.utils import stable_dumps, tree_filter

from .errors import ConfigurationError


FLOAT_FORMAT = "%.12g"


class ResultEnvelope(pydantic.BaseModel):
    """Common wrapper of every JSON result file."""

    kind: str
    config: dict[str, Any] = {}
    seed: int | None = None
    provenance: str | None = None
    metadata: dict[str, Any] = {}
    data: Any = None


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    """Write a DataFrame without its index."""
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_json(data: Any, path: Path) -> Path:
    """Write JSON with sorted keys; None and NaN leaves of dicts are dropped."""
    if isinstance(data, pydantic.BaseModel):
        data = data.model_dump(mode="json")
    if isinstance(data, dict):
        data = tree_filter(data)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(stable_dumps(data) + "\n", encoding="utf-8")
    return path


def write_envelope(
    path: Path,
    kind: str,
    data: Any,
    config: pydantic.BaseModel | dict[str, Any] | None = None,
    seed: int | None = None,
    provenance: str | None = None,
    metadata: dict[str, Any] | None = None,
) -> Path:
    """Wrap ``data`` in a ``ResultEnvelope`` and write it."""
    if isinstance(config, pydantic.BaseModel):
        config = config.model_dump(mode="json")
    envelope = ResultEnvelope(
        kind=kind,
        config=config or {},
        seed=seed,
        provenance=provenance,
        metadata=metadata or {},
        data=data,
    )
    payload = envelope.model_dump(mode="json", exclude={"data"})
    payload["data"] = data.model_dump(mode="json") if isinstance(
        data, pydantic.BaseModel
    ) else data
    return write_json(payload, path)


def read_json(path: Path) -> Any:
    """Load a JSON file.

    Raises
    ------
    ConfigurationError
        When the file is missing or not valid JSON.
    """
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigurationError(f"File not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc


def read_envelope(path: Path) -> ResultEnvelope:
    """Load a file written by ``write_envelope``."""
    try:
        return ResultEnvelope.model_validate(read_json(path))
    except pydantic.ValidationError as exc:
        raise ConfigurationError(f"{path} is not a result envelope: {exc}") from exc
