"""File formats: delimited tables, nested-object hierarchies, key-value configs.

Everything is plain text, diffable, and round-trips byte-identically when
written by this module: floats use shortest-repr formatting, hierarchy
exports use canonical key order, two-space indentation and siblings sorted
by first leaf class index, and key-value files are sorted by key.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import AttributeMatrix, ClassCatalog, DataFormatError, FeatureSet
from .hierarchy import Hierarchy


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# -- class catalog -------------------------------------------------------------


def read_catalog(path) -> ClassCatalog:
    """Catalog rows are `class_name,novel` with novel in {0, 1}; order fixes indices."""
    names, novel = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["class_name", "novel"]:
            raise DataFormatError(f"{path}: expected header 'class_name,novel'")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            if row[1] not in ("0", "1"):
                raise DataFormatError(f"{path}:{lineno}: novel flag must be 0 or 1")
            names.append(row[0])
            novel.append(row[1] == "1")
    return ClassCatalog(names=tuple(names), novel=np.asarray(novel, dtype=bool))


def write_catalog(path, catalog: ClassCatalog):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_name", "novel"])
        for name, flag in zip(catalog.names, catalog.novel):
            writer.writerow([name, "1" if flag else "0"])


# -- feature tables --------------------------------------------------------------


def read_features(path, catalog: ClassCatalog) -> FeatureSet:
    """Parse `item_id,label,f0..f{d-1}` rows; an empty label means unlabeled."""
    item_ids, labels, rows = [], [], []
    dim = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3 or header[0] != "item_id" or header[1] != "label":
            raise DataFormatError(f"{path}: expected header 'item_id,label,f0,...'")
        dim = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 2:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {dim + 2} fields, got {len(row)}"
                )
            item_ids.append(row[0])
            labels.append(-1 if row[1] == "" else catalog.index_of(row[1]))
            try:
                vec = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(vec)):
                raise DataFormatError(f"{path}:{lineno}: non-finite feature value")
            rows.append(vec)
    features = np.asarray(rows, dtype=float) if rows else np.zeros((0, dim))
    return FeatureSet(item_ids=item_ids, labels=np.asarray(labels, dtype=int), features=features)


def write_features(path, feature_set: FeatureSet, catalog: ClassCatalog):
    dim = feature_set.dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item_id", "label"] + [f"f{i}" for i in range(dim)])
        for item_id, label, row in zip(feature_set.item_ids, feature_set.labels, feature_set.features):
            name = "" if label < 0 else catalog.names[label]
            writer.writerow([item_id, name] + [repr(float(v)) for v in row])


# -- attribute matrix -------------------------------------------------------------


def read_attribute_matrix(path) -> tuple:
    """Returns (AttributeMatrix, row class names); entries must be ternary."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2 or header[0] != "class_name":
            raise DataFormatError(f"{path}: expected header 'class_name,<attribute names>'")
        attr_names = header[1:]
        names, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            names.append(row[0])
            parsed = []
            for col, cell in enumerate(row[1:]):
                if cell not in ("-1", "0", "1"):
                    raise DataFormatError(
                        f"{path}:{lineno}: non-ternary value at row {lineno - 2}, column {col}: {cell!r}"
                    )
                parsed.append(int(cell))
            rows.append(parsed)
    if not rows:
        raise DataFormatError(f"{path}: attribute matrix has no class rows")
    matrix = AttributeMatrix(values=np.asarray(rows, dtype=np.int8), attribute_names=tuple(attr_names))
    return matrix, names


def write_attribute_matrix(path, attributes: AttributeMatrix, catalog: ClassCatalog):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_name"] + list(attributes.attribute_names))
        for name, row in zip(catalog.names, attributes.values):
            writer.writerow([name] + [str(int(v)) for v in row])


# -- hierarchy ---------------------------------------------------------------------


def export_hierarchy(tree: Hierarchy, path, catalog: ClassCatalog):
    """Canonical nested-object export; inner keys: label, class, children."""
    Path(path).write_text(json.dumps(tree.to_nested(catalog), indent=2) + "\n")


def import_hierarchy(path, catalog: ClassCatalog) -> Hierarchy:
    try:
        nested = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    tree = Hierarchy.from_nested(nested, catalog)
    tree.annotate_rewards()
    return tree


# -- flat key-value files ------------------------------------------------------------


def read_kv(path) -> dict:
    """Flat `key = value` lines; blank lines and #-comments are skipped."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise DataFormatError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_kv(path, mapping: dict):
    lines = [f"{k} = {_fmt(v)}" for k, v in sorted(mapping.items())]
    Path(path).write_text("\n".join(lines) + "\n")


# -- result tables ----------------------------------------------------------------


def write_table(path, header, rows):
    """CSV with shortest-repr floats; byte-identical across reruns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_table(path) -> tuple:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]
