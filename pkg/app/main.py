"""
Container entry point: ``uvicorn app.main:app``.
"""
import os
import sys

# Add main python directory to path
main_python_dir = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src", "main", "python")
if main_python_dir not in sys.path:
    sys.path.insert(0, main_python_dir)

from recurvuln.api import app, run_app  # noqa: E402

__all__ = ["app", "run_app"]

if __name__ == "__main__":
    run_app()
