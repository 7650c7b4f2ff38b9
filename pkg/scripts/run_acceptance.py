#!/usr/bin/env python3
"""Run the acceptance suite and print its per-criterion summary.

Extra arguments go to pytest, e.g. ``-k "not criterion_6"``.
"""
import sys
from pathlib import Path

import pytest

if __name__ == "__main__":
    tests = Path(__file__).resolve().parents[1] / "tests" / "test_acceptance.py"
    sys.exit(pytest.main([str(tests), "-v", *sys.argv[1:]]))
