"""Canonical case fixtures shipped with the package."""
import os

from ..netmodel import load_case

_DIR = os.path.dirname(__file__)


def names():
    return sorted(f[:-5] for f in os.listdir(_DIR) if f.endswith(".json"))


def path(name: str) -> str:
    p = os.path.join(_DIR, f"{name}.json")
    if not os.path.exists(p):
        raise FileNotFoundError(f"no fixture named {name!r}; available: {', '.join(names())}")
    return p


def load(name: str):
    return load_case(path(name))
