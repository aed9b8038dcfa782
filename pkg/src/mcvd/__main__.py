"""Entry point for ``python -m src.mcvd``."""

import sys

from .cli import main


sys.exit(main())
