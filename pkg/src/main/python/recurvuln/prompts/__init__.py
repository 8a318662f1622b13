"""
Versioned agent prompts shipped as package data.
"""
from functools import lru_cache
from pathlib import Path
from string import Template

PROMPT_DIR = Path(__file__).parent


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    return (PROMPT_DIR / f"{name}.md").read_text(encoding="utf-8")


def render_prompt(name: str, **fields: str) -> str:
    """Fill ``$placeholders`` in a prompt; unknown placeholders are left as-is."""
    return Template(load_prompt(name)).safe_substitute(**fields)
