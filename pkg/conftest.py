import sys
from pathlib import Path

# run from source: make `main`, `src` and `contracts` importable
sys.path.insert(0, str(Path(__file__).parent))
