"""Versioned prompt templates.

Templates are plain text files named ``<template_id>.txt`` and use
``string.Template`` placeholders (``$name``), so literal JSON braces in the
schema instructions need no escaping. Template identifiers are recorded in
debate records and run reports so a report always names the prompt text
that produced it.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template


@lru_cache(maxsize=None)
def load(template_id: str) -> str:
    """Raw template text for an identifier like ``compress.v1``."""
    return (
        resources.files(__package__)
        .joinpath(f"{template_id}.txt")
        .read_text(encoding="utf-8")
        .strip()
    )


def render(template_id: str, **values: str) -> str:
    return Template(load(template_id)).substitute(**values)
