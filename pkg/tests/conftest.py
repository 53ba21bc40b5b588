import os
import sys

# Make sibling helper modules (oracles.py) importable from test files.
sys.path.insert(0, os.path.dirname(__file__))
