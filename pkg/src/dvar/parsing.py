"""Schema-constrained response parsing shared by the provider-facing stages.

Providers are instructed to answer with a single JSON object. Parsing is
strict about required fields but tolerant about where the object sits in the
response text (models often wrap JSON in prose or code fences). A failed
parse can be retried once per the stage contracts; the retry appends a short
repair instruction naming the violation, so the retried request is a new
request rather than a guaranteed replay of the same bad output.
"""

from __future__ import annotations

import json
import logging
from typing import Any, Callable, TypeVar

from .domain import DvarError

logger = logging.getLogger(__name__)

T = TypeVar("T")


class ParseError(DvarError):
    """Provider output does not satisfy the expected schema."""


def extract_json_object(text: str) -> dict[str, Any]:
    """Pull the first JSON object out of a response.

    Accepts raw objects, fenced blocks, and leading/trailing prose. Raises
    ParseError when no balanced object parses.
    """
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(stripped)
            if isinstance(obj, dict):
                return obj
        except json.JSONDecodeError:
            pass
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escape = False
        for pos in range(start, len(text)):
            ch = text[pos]
            if in_string:
                if escape:
                    escape = False
                elif ch == "\\":
                    escape = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    candidate = text[start : pos + 1]
                    try:
                        obj = json.loads(candidate)
                    except json.JSONDecodeError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        start = text.find("{", start + 1)
    raise ParseError("no JSON object found in response")


def require_str(obj: dict[str, Any], key: str, *, allow_empty: bool = True) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise ParseError(f"field {key!r} missing or not a string")
    if not allow_empty and not value.strip():
        raise ParseError(f"field {key!r} must be nonempty")
    return value


def require_str_list(obj: dict[str, Any], key: str, *, default: bool = False) -> list[str]:
    value = obj.get(key)
    if value is None and default:
        return []
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ParseError(f"field {key!r} missing or not a list of strings")
    return value


def repair_message(error: ParseError) -> tuple[str, str]:
    """User message appended before a retry, naming the schema violation."""
    return (
        "user",
        f"The previous response failed validation: {error}. "
        "Answer again with a single valid JSON object and nothing else.",
    )


def call_with_schema(
    send: Callable[[list[tuple[str, str]]], str],
    messages: list[tuple[str, str]],
    parse: Callable[[str], T],
    retries: int = 1,
) -> T:
    """Issue a request and parse the response, retrying on schema failures.

    ``send`` maps a message list to response text. On a ParseError a repair
    instruction is appended and the request re-sent, up to ``retries`` times;
    the final ParseError propagates.
    """
    attempt_messages = list(messages)
    last_error: ParseError | None = None
    for attempt in range(retries + 1):
        text = send(attempt_messages)
        try:
            return parse(text)
        except ParseError as exc:
            last_error = exc
            logger.warning("schema parse failed (attempt %d): %s", attempt + 1, exc)
            attempt_messages = attempt_messages + [repair_message(exc)]
    assert last_error is not None
    raise last_error
