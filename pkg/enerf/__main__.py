"""
Entry point for running enerf via `python -m enerf`.
"""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
