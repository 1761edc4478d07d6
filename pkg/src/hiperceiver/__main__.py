"""Allow ``python -m hiperceiver``."""
import sys

from .cli import main

sys.exit(main())
