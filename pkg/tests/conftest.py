import sys
from pathlib import Path

# Make the shared oracle helpers importable regardless of rootdir layout.
sys.path.insert(0, str(Path(__file__).parent))

try:
    from hypothesis import settings

    settings.register_profile("flowcast", max_examples=50, deadline=None)
    settings.load_profile("flowcast")
except ImportError:
    pass
