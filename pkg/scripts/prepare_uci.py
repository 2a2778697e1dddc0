#!/usr/bin/env python3
"""Rebuild the glass, yeast and sat CSVs from the ``imbalanced_databases`` wheel.

The UCI archive is not always reachable, but that wheel ships the original
``glass.data`` and Statlog ``sat.trn``/``sat.tst`` files verbatim.  Yeast is
only present as KEEL binary splits; the ten-class label of every row is
recovered by intersecting them (KEEL class order MIT, NUC, CYT, ME1, ME2, ME3,
EXC, VAC, POX, ERL).

    pip download --no-deps imbalanced-databases==0.1.1 -d /tmp/wheels
    python scripts/prepare_uci.py /tmp/wheels/imbalanced_databases-0.1.1-py3-none-any.whl data/
"""

import argparse
import collections
import csv
import io
import sys
import zipfile
from pathlib import Path

ROOT = "imbalanced_databases/data/"
GLASS_COLUMNS = ["RI", "Na", "Mg", "Al", "Si", "K", "Ca", "Ba", "Fe", "type"]
YEAST_COLUMNS = ["mcg", "gvh", "alm", "mit", "erl", "pox", "vac", "nuc", "site"]


def _text(zf, name):
    return zf.read(ROOT + name).decode("utf-8")


def _keel_rows(text):
    rows = []
    for line in io.StringIO(text):
        if line.startswith("@") or not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        rows.append((tuple(round(float(v), 4) for v in parts[:-1]), parts[-1]))
    return rows


def _members(zf, name, label="positive"):
    return collections.Counter(f for f, lab in _keel_rows(_text(zf, name)) if lab == label)


def build_glass(zf):
    out = []
    for line in io.StringIO(_text(zf, "glass/glass.data.txt")):
        parts = line.strip().split(",")
        if len(parts) == 11:
            out.append(parts[1:])  # drop the Id column
    return GLASS_COLUMNS, out


def build_sat(zf):
    out = []
    for name in ("satimage/sat.trn.txt", "satimage/sat.tst.txt"):
        for line in io.StringIO(_text(zf, name)):
            parts = line.split()
            if parts:
                out.append(parts)
    header = [f"b{i}" for i in range(36)] + ["class"]
    return header, out


def build_yeast(zf):
    base = _keel_rows(_text(zf, "yeast1/yeast1.dat"))
    known = {
        "NUC": _members(zf, "yeast1/yeast1.dat"),
        "ME3": _members(zf, "yeast3/yeast3.dat"),
        "ME2": _members(zf, "yeast4/yeast4.dat"),
        "ME1": _members(zf, "yeast5/yeast5.dat"),
        "EXC": _members(zf, "yeast6/yeast6.dat"),
        "VAC": _members(zf, "yeast-1-4-5-8_vs_7/yeast-1-4-5-8_vs_7.dat"),
        "POX": _members(zf, "yeast-2_vs_8/yeast-2_vs_8.dat"),
        "CYT": _members(zf, "yeast-2_vs_4/yeast-2_vs_4.dat", "negative"),
    }
    # negatives of 1-2-8-9 vs 7 are NUC, CYT, POX and ERL
    erl_pool = _members(zf, "yeast-1-2-8-9_vs_7/yeast-1-2-8-9_vs_7.dat", "negative")
    out = []
    for features, _ in base:
        hits = [name for name, members in known.items() if members[features] > 0]
        if len(hits) > 1:
            raise ValueError(f"ambiguous yeast row {features}: {hits}")
        if not hits:
            rest = erl_pool[features] - known["NUC"][features] - known["CYT"][features] - known["POX"][features]
            hits = ["ERL" if rest > 0 else "MIT"]
        out.append([f"{v:.2f}" for v in features] + hits)
    counts = collections.Counter(row[-1] for row in out)
    expected = {"CYT": 463, "NUC": 429, "MIT": 244, "ME3": 163, "ME2": 51,
                "ME1": 44, "EXC": 35, "VAC": 30, "POX": 20, "ERL": 5}
    if dict(counts) != expected:
        raise ValueError(f"yeast class counts {dict(counts)} differ from UCI {expected}")
    return YEAST_COLUMNS, out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("wheel", type=Path)
    parser.add_argument("out_dir", type=Path)
    args = parser.parse_args(argv)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(args.wheel) as zf:
        for name, builder in (("glass", build_glass), ("yeast", build_yeast), ("sat", build_sat)):
            header, rows = builder(zf)
            path = args.out_dir / f"{name}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                writer.writerows(rows)
            print(f"{path}: {len(rows)} rows, {len(header) - 1} features")
    return 0


if __name__ == "__main__":
    sys.exit(main())
