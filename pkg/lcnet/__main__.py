"""Allow ``python -m lcnet``."""

import sys

from .cli import main

sys.exit(main())
