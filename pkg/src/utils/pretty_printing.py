"""Pretty-Print Utils."""

import json
from typing import Any

import numpy as np
import pydantic


def _serializer(item: Any) -> Any:
    """Serialize using heuristics."""
    if isinstance(item, pydantic.BaseModel):
        return item.model_dump(mode="json")

    if isinstance(item, np.ndarray):
        return item.tolist()

    if isinstance(item, np.generic):
        return item.item()

    return str(item)


def stable_dumps(data: Any, indent: int | None = 2) -> str:
    """Serialize to JSON with sorted keys, so equal data gives equal bytes."""
    return json.dumps(data, indent=indent, sort_keys=True, default=_serializer)


def pretty_print(data: Any) -> str:
    """Print nested items with indentations."""
    output = json.dumps(data, indent=2, default=_serializer)
    print(output)
    return output
