# Recurring Vulnerability Manager API
# Main application package; ``uvicorn app:app`` and ``uvicorn app.main:app`` both work
from .main import app, run_app

__all__ = ["app", "run_app"]
