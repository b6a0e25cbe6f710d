"""Deterministic JSON output.

The stdlib encoder prints floats with ``repr`` (shortest round-trip form);
reports here fix the format to 17 significant digits instead so that files
are byte-identical across runs and platforms.  Non-finite values become null.
"""
from __future__ import annotations

import json
import math

import numpy as np


def _format(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "null"
        text = f"{x:.17g}"
        # keep floats recognizable as floats on reload
        return text if any(c in text for c in ".e") else text + ".0"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, complex):
        return _format([obj.real, obj.imag], indent, level)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_format(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_format(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _format(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    return _format(obj, indent, 0) + "\n"
