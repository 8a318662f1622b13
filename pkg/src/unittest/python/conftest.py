import os
import sys

# Test modules import the sibling ``support`` helper as a top-level module,
# the way ``unittest discover`` exposes it.
_here = os.path.dirname(os.path.abspath(__file__))
if _here not in sys.path:
    sys.path.insert(0, _here)
