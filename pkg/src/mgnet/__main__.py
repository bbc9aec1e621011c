"""Allows ``python -m mgnet`` as an alias for the ``mgnet`` console script."""
import sys

from .cli import main

sys.exit(main())
