#!/usr/bin/env python3
"""
Zeta-function laboratory - Main Entry Point

Run a pipeline stage:
    python main.py orbits --config cat.json --n 8
    python main.py verify --config cat.json --suite identities
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from zetalab.cli import main


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        sys.exit(130)
