"""Utils for handling nested dict."""

from typing import Any, Callable, TypeVar

import numpy as np


Tree = TypeVar("Tree", bound=dict)


def _is_present(value: Any) -> bool:
    """Leaf is neither None nor NaN."""
    if value is None:
        return False
    return not (isinstance(value, float) and np.isnan(value))


def tree_filter(
    data: Tree,
    criteria_fn: Callable[[Any], bool] = _is_present,
) -> Tree:
    """Keep only leaves for which criteria is True.

    Filters out None and NaN leaves if criteria is not specified. Empty
    sub-trees left behind by the filter are dropped as well.
    """
    output: Tree = {}  # type: ignore[reportAssignType]
    for k, v in data.items():
        if isinstance(v, dict):
            subtree = tree_filter(v, criteria_fn=criteria_fn)
            if subtree:
                output[k] = subtree
        elif criteria_fn(v):
            output[k] = v

    return output
