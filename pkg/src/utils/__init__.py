"""Shared toolings for the MCvD channel toolkit."""

from .async_utils import run_in_threads
from .data.batching import batch_sizes, chunk_bounds
from .env_vars import Configs
from .logging import set_up_logging
from .pretty_printing import pretty_print, stable_dumps
from .trees import tree_filter
