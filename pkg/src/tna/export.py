"""Writers for DOT, GraphML, CSV tables and JSON bundles.

All writers go through ``atomic_write`` (temp file + rename). ``stamp`` is a
list of ``key=value`` strings (config hash, seed) embedded as comments.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _quote(s: str) -> str:
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(labels: Sequence[str], weights: np.ndarray, *, initial: Sequence[float] | None = None,
           name: str = "tna", signed: bool = False, stamp: Sequence[str] = (),
           decimals: int = 2, communities: Mapping[str, int] | None = None) -> str:
    """Directed graph with edge labels rounded to ``decimals``.

    With ``initial`` each node carries a ``pie`` attribute holding its
    initial probability. ``signed`` labels edges with an explicit sign and
    a ``sign`` attribute (subtraction networks).
    """
    lines = [f"// {s}" for s in stamp]
    lines.append(f"digraph {_quote(name)} {{")
    for i, lab in enumerate(labels):
        attrs = [f"label={_quote(lab)}"]
        if initial is not None:
            attrs.append(f"pie={float(initial[i]):.4f}")
        if communities is not None and lab in communities:
            attrs.append(f"community={communities[lab]}")
        lines.append(f"  {_quote(lab)} [{', '.join(attrs)}];")
    W = np.asarray(weights, dtype=float)
    for i, j in zip(*np.nonzero(W != 0)):
        w = float(W[i, j])
        text = f"{w:+.{decimals}f}" if signed else f"{w:.{decimals}f}"
        attrs = [f"label={_quote(text)}", f"weight={w:.12g}"]
        if signed:
            attrs.append(f"sign={_quote('positive' if w > 0 else 'negative')}")
        lines.append(f"  {_quote(labels[i])} -> {_quote(labels[j])} [{', '.join(attrs)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_graphml(labels: Sequence[str], weights: np.ndarray, *, initial: Sequence[float] | None = None,
               stamp: Sequence[str] = (), node_data: Mapping[str, Mapping[str, float]] | None = None) -> str:
    ns = "http://graphml.graphdrawing.org/xmlns"
    root = ET.Element("graphml", xmlns=ns)
    ET.SubElement(root, "key", id="weight", attrib={"for": "edge", "attr.name": "weight", "attr.type": "double"})
    ET.SubElement(root, "key", id="initial", attrib={"for": "node", "attr.name": "initial", "attr.type": "double"})
    ET.SubElement(root, "key", id="stamp", attrib={"for": "graph", "attr.name": "stamp", "attr.type": "string"})
    extra = sorted({k for d in (node_data or {}).values() for k in d})
    for key in extra:
        ET.SubElement(root, "key", id=key, attrib={"for": "node", "attr.name": key, "attr.type": "double"})
    g = ET.SubElement(root, "graph", id="tna", edgedefault="directed")
    if stamp:
        ET.SubElement(g, "data", key="stamp").text = "; ".join(stamp)
    for i, lab in enumerate(labels):
        node = ET.SubElement(g, "node", id=str(lab))
        if initial is not None:
            ET.SubElement(node, "data", key="initial").text = repr(float(initial[i]))
        for key in extra:
            if lab in (node_data or {}) and key in node_data[lab]:
                ET.SubElement(node, "data", key=key).text = repr(float(node_data[lab][key]))
    W = np.asarray(weights, dtype=float)
    for k, (i, j) in enumerate(zip(*np.nonzero(W != 0))):
        e = ET.SubElement(g, "edge", id=f"e{k}", source=str(labels[i]), target=str(labels[j]))
        ET.SubElement(e, "data", key="weight").text = repr(float(W[i, j]))
    ET.indent(root)
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".12g")
    if v is None:
        return ""
    return str(v)


def to_csv(header: Sequence[str], rows: Iterable[Sequence], stamp: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for s in stamp:
        buf.write(f"# {s}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def matrix_csv(labels: Sequence[str], matrix: np.ndarray, stamp: Sequence[str] = ()) -> str:
    rows = [[lab, *(format(float(x), ".17g") for x in row)] for lab, row in zip(labels, matrix)]
    return to_csv(["from/to", *labels], rows, stamp)


def read_csv_table(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def to_json(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def jsonable(obj):
    """Convert numpy values and non-finite floats into JSON-safe values."""
    if isinstance(obj, Mapping):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if x != x:
            return "nan"
        if x in (float("inf"), float("-inf")):
            return "inf" if x > 0 else "-inf"
        return x
    return obj
