"""Canonical JSON encoding shared by scene files, datasets and config hashes.

Floats are rounded to a fixed number of significant digits before encoding so
that repeated runs (and write -> read -> write round trips) are byte-identical.
"""

import hashlib
import json
import math
from typing import Any, Optional

SIGNIFICANT_DIGITS = 9


def round_sig(value: float, digits: int = SIGNIFICANT_DIGITS) -> float:
    """Round to ``digits`` significant digits; -0.0 collapses to 0.0."""
    if not math.isfinite(value):
        raise ValueError(f"Non-finite value cannot be serialized: {value}")
    return float(f"{value:.{digits}g}") + 0.0


def canonicalize(obj: Any, digits: int = SIGNIFICANT_DIGITS) -> Any:
    """Recursively round floats and convert tuples/numpy scalars to JSON types."""
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, int):
        return obj
    if isinstance(obj, float):
        return round_sig(obj, digits)
    if isinstance(obj, dict):
        return {str(k): canonicalize(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canonicalize(v, digits) for v in obj]
    # numpy scalars and arrays
    if hasattr(obj, "tolist"):
        return canonicalize(obj.tolist(), digits)
    raise TypeError(f"Cannot canonicalize value of type {type(obj).__name__}")


def dumps(obj: Any, *, sort_keys: bool = True, indent: Optional[int] = None) -> str:
    """Encode ``obj`` canonically (compact separators unless ``indent`` is set)."""
    separators = (",", ":") if indent is None else (",", ": ")
    return json.dumps(
        canonicalize(obj),
        sort_keys=sort_keys,
        indent=indent,
        separators=separators,
        ensure_ascii=False,
        allow_nan=False,
    )


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
