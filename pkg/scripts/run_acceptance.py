#!/usr/bin/env python3
"""Run the acceptance suite and print one PASS/FAIL line per criterion (about 8 minutes)."""
import sys
from pathlib import Path

import pytest

if __name__ == "__main__":
    suite = Path(__file__).resolve().parent.parent / "tests" / "test_acceptance.py"
    sys.exit(pytest.main([str(suite), "-q", "-s", "-p", "no:cacheprovider"]))
