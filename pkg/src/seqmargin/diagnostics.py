"""Margin measurement, recall@K, beam-width sweeps, and report emission.

Everything here runs read-only over a frozen encoder-decoder (or over ranked
lists produced by either model family) and aggregates into small tables.
Numeric report cells pass through one shared 12-significant-digit formatter,
so the CSV and JSON encodings of a table carry identical values and a
parse(emit(table)) round trip is exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import ed_model as ed
from .corpus import PrefixTrie, TokenSeq, with_bos

LENGTH_BUCKETS = tuple(str(i) for i in range(1, 10)) + ("10+",)


def length_bucket(n: int) -> str:
    """Bucket a surface length (content tokens plus EOS): exact 1-9, then 10+."""
    return str(n) if n < 10 else "10+"


# ---------------------------------------------------------------------------
# Margin records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarginRecord:
    """Margins of one (correct, predicted) pair of unequal sequences.

    The local margin compares the two tokens at the first divergent position,
    conditioned on the *true* prefix: on the probability scale in
    ``local_margin`` and on the log scale in ``local_margin_log``. The global
    margin is the full-sequence log-probability difference, the quantity
    inference actually ranks by.
    """

    local_margin: float
    local_margin_log: float
    global_margin: float
    correct_len: int
    predicted_len: int
    first_divergence_pos: int


def first_divergence(a: TokenSeq, b: TokenSeq) -> int:
    """1-based index of the first position where the sequences differ.

    Distinct EOS-terminated sequences always diverge at or before the end of
    the shorter one, so the index never exceeds min(len(a), len(b)).
    """
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i + 1
    raise ValueError("sequences do not diverge")


def margin_pair(model: ed.EdModel, context: TokenSeq, y_plus: TokenSeq,
                y_minus: TokenSeq) -> MarginRecord:
    """Margins between a correct and a differing predicted surface sequence."""
    y_plus, y_minus = tuple(y_plus), tuple(y_minus)
    if y_plus == y_minus:
        raise ValueError("margin_pair needs two distinct sequences")
    v_x = ed.encode_context(model, context)
    vectors = ed.position_logprob_vectors(model, v_x, with_bos(y_plus))
    j = first_divergence(y_plus, y_minus)
    dist = vectors[j - 1]
    lp_plus = float(dist[y_plus[j - 1]])
    lp_minus = float(dist[y_minus[j - 1]])
    global_margin = (ed.sequence_logprob(model, v_x, with_bos(y_plus))
                     - ed.sequence_logprob(model, v_x, with_bos(y_minus)))
    return MarginRecord(
        local_margin=math.exp(lp_plus) - math.exp(lp_minus),
        local_margin_log=lp_plus - lp_minus,
        global_margin=global_margin,
        correct_len=len(y_plus),
        predicted_len=len(y_minus),
        first_divergence_pos=j,
    )


def prediction_margin_sweep(model: ed.EdModel, examples: Sequence,
                            trie: PrefixTrie, width: int = 15,
                            length_norm_f: float = 0.0
                            ) -> tuple[list[MarginRecord], dict]:
    """Margin records over the wrongly predicted subset of a test set.

    Runs beam search per example, keeps the top prediction, and for every
    wrong one records margin_pair(truth, prediction). The summary reports the
    fraction of wrong predictions with positive local margin but negative
    global margin, and the fraction with negative global margin at all (the
    search-is-not-the-bottleneck statistic).
    """
    records: list[MarginRecord] = []
    n_examples = n_wrong = n_unpredicted = 0
    for ex in examples:
        n_examples += 1
        truth = tuple(ex.label[1:])
        v_x = ed.encode_context(model, ex.context)
        ranked = ed.beam_search(model, v_x, trie, width, length_norm_f)
        if not ranked:
            n_unpredicted += 1
            n_wrong += 1
            continue
        top = ranked[0][0]
        if top != truth:
            n_wrong += 1
            records.append(margin_pair(model, ex.context, truth, top))
    n_discrepant = sum(1 for r in records
                       if r.local_margin > 0 and r.global_margin < 0)
    n_global_neg = sum(1 for r in records if r.global_margin < 0)
    summary = {
        "n_examples": n_examples,
        "n_wrong": n_wrong,
        "n_unpredicted": n_unpredicted,
        "frac_local_pos_global_neg": n_discrepant / n_wrong if n_wrong else 0.0,
        "frac_global_neg": n_global_neg / n_wrong if n_wrong else 0.0,
        "beam_width": width,
        "length_norm_f": length_norm_f,
    }
    return records, summary


# ---------------------------------------------------------------------------
# Recall@K
# ---------------------------------------------------------------------------


@dataclass
class RecallTable:
    """Per (K, length bucket): numerator, denominator, recall."""

    ks: list[int]
    buckets: list[str]
    entries: dict[tuple[int, str], tuple[int, int, float]]

    def recall(self, k: int, bucket: str) -> float:
        return self.entries[(k, bucket)][2]

    def to_table(self, meta: dict | None = None) -> "Table":
        rows = []
        for k in self.ks:
            for bucket in self.buckets:
                num, den, rec = self.entries[(k, bucket)]
                rows.append([k, bucket, num, den, rec])
        return Table("recall", ["K", "bucket", "num", "den", "recall"],
                     ["int", "str", "int", "int", "float"], rows, meta or {})


def recall_at_k(ranked: Sequence[Sequence[TokenSeq]],
                truths: Sequence[TokenSeq], ks: Iterable[int]) -> RecallTable:
    """Fraction of examples whose truth appears in the top K, by length bucket.

    Ranked lists shorter than K simply miss; denominators partition the
    example set across buckets.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("Ks must be positive integers")
    if len(ranked) != len(truths):
        raise ValueError("one ranked list per truth required")
    buckets_seen: dict[str, int] = {}
    hits: dict[tuple[int, str], int] = {}
    for cand_list, truth in zip(ranked, truths):
        truth = tuple(truth)
        bucket = length_bucket(len(truth))
        buckets_seen[bucket] = buckets_seen.get(bucket, 0) + 1
        for k in ks:
            if any(tuple(c) == truth for c in list(cand_list)[:k]):
                hits[(k, bucket)] = hits.get((k, bucket), 0) + 1
    buckets = [b for b in LENGTH_BUCKETS if b in buckets_seen]
    entries = {}
    for k in ks:
        for bucket in buckets:
            num = hits.get((k, bucket), 0)
            den = buckets_seen[bucket]
            entries[(k, bucket)] = (num, den, _round12(num / den))
    return RecallTable(ks, buckets, entries)


# ---------------------------------------------------------------------------
# Beam-width sweep
# ---------------------------------------------------------------------------


def beam_width_sweep(model: ed.EdModel, examples: Sequence, trie: PrefixTrie,
                     widths: Sequence[int] = (1, 5, 10, 15),
                     length_norm_f: float = 0.0) -> "Table":
    """Correct top-1 counts per (beam width, correct-length bucket)."""
    counts: dict[tuple[int, str], int] = {}
    totals: dict[str, int] = {}
    per_example = [(ex, tuple(ex.label[1:]),
                    ed.encode_context(model, ex.context)) for ex in examples]
    for _, truth, _ in per_example:
        bucket = length_bucket(len(truth))
        totals[bucket] = totals.get(bucket, 0) + 1
    for width in widths:
        for ex, truth, v_x in per_example:
            ranked = ed.beam_search(model, v_x, trie, width, length_norm_f)
            if ranked and ranked[0][0] == truth:
                key = (width, length_bucket(len(truth)))
                counts[key] = counts.get(key, 0) + 1
    buckets = [b for b in LENGTH_BUCKETS if b in totals]
    rows = [[w, b, counts.get((w, b), 0), totals[b]]
            for w in widths for b in buckets]
    return Table("beam_sweep", ["width", "bucket", "correct", "total"],
                 ["int", "str", "int", "int"], rows,
                 {"length_norm_f": repr(float(length_norm_f))})


# ---------------------------------------------------------------------------
# 2-D margin histogram
# ---------------------------------------------------------------------------


@dataclass
class Hist2d:
    """Binned (local margin, global margin) counts with quadrant fractions."""

    x_edges: np.ndarray
    y_edges: np.ndarray
    counts: np.ndarray
    quadrants: dict[str, float]
    n_records: int
    local_scale: str

    def total(self) -> int:
        return int(self.counts.sum())


def margin_histogram2d(records: Sequence[MarginRecord], bins: int = 20,
                       local_scale: str = "prob") -> Hist2d:
    """2-D histogram of local vs global margins over margin records.

    ``local_scale`` selects the probability-scale local margin (default) or
    the log-scale one; pairs differing in a single position sit exactly on
    the diagonal under the log scale. Quadrant fractions split the records by
    the signs (positive vs nonpositive) of the two margins.
    """
    if isinstance(bins, int) and bins < 2:
        raise ValueError("need at least 2 bins per axis")
    if local_scale not in ("prob", "log"):
        raise ValueError(f"unknown local margin scale {local_scale!r}")
    if local_scale == "prob":
        xs = np.array([r.local_margin for r in records], dtype=np.float64)
    else:
        xs = np.array([r.local_margin_log for r in records], dtype=np.float64)
    ys = np.array([r.global_margin for r in records], dtype=np.float64)
    if len(records) == 0:
        edges = np.linspace(-1.0, 1.0, bins + 1 if isinstance(bins, int) else 3)
        counts = np.zeros((len(edges) - 1, len(edges) - 1))
        quadrants = {q: 0.0 for q in
                     ("local_pos_global_pos", "local_pos_global_neg",
                      "local_neg_global_pos", "local_neg_global_neg")}
        return Hist2d(edges, edges.copy(), counts, quadrants, 0, local_scale)
    counts, x_edges, y_edges = np.histogram2d(xs, ys, bins=bins)
    n = len(records)
    quadrants = {
        "local_pos_global_pos": _round12(((xs > 0) & (ys > 0)).sum() / n),
        "local_pos_global_neg": _round12(((xs > 0) & (ys <= 0)).sum() / n),
        "local_neg_global_pos": _round12(((xs <= 0) & (ys > 0)).sum() / n),
        "local_neg_global_neg": _round12(((xs <= 0) & (ys <= 0)).sum() / n),
    }
    return Hist2d(x_edges, y_edges, counts, quadrants, n, local_scale)


def hist2d_to_json(hist: Hist2d, path) -> None:
    payload = {
        "report": "seqmargin-hist2d",
        "schema_version": 1,
        "local_scale": hist.local_scale,
        "n_records": hist.n_records,
        "x_edges": [_round12(v) for v in hist.x_edges],
        "y_edges": [_round12(v) for v in hist.y_edges],
        "counts": [[int(c) for c in row] for row in hist.counts],
        "quadrant_fractions": hist.quadrants,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def hist2d_from_json(path) -> Hist2d:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("report") != "seqmargin-hist2d":
        raise ValueError(f"{path}: not a margin histogram report")
    return Hist2d(np.array(payload["x_edges"]), np.array(payload["y_edges"]),
                  np.array(payload["counts"], dtype=np.float64),
                  payload["quadrant_fractions"], payload["n_records"],
                  payload["local_scale"])


def margin_records_table(records: Sequence[MarginRecord],
                         length_norm_f: float = 0.0) -> "Table":
    rows = [[r.local_margin, r.local_margin_log, r.global_margin,
             r.correct_len, r.predicted_len, r.first_divergence_pos]
            for r in records]
    return Table("margin_records",
                 ["local_margin", "local_margin_log", "global_margin",
                  "correct_len", "predicted_len", "first_divergence_pos"],
                 ["float", "float", "float", "int", "int", "int"], rows,
                 {"length_norm_f": repr(float(length_norm_f))})


# ---------------------------------------------------------------------------
# Generic report tables
# ---------------------------------------------------------------------------


def _round12(x: float) -> float:
    """The shared numeric formatter: 12 significant digits."""
    return float(f"{float(x):.12g}")


def _format_cell(value, dtype: str) -> str:
    if dtype == "float":
        return f"{float(value):.12g}"
    return str(value)


def _parse_cell(text: str, dtype: str):
    if dtype == "int":
        return int(text)
    if dtype == "float":
        return float(text)
    return text


@dataclass
class Table:
    """Rectangular report with typed columns and deterministic encoding.

    Float cells are normalized to 12 significant digits on construction, so
    the CSV and JSON encodings carry identical numbers and emitting then
    parsing reproduces the table exactly.
    """

    name: str
    columns: list[str]
    dtypes: list[str]
    rows: list[list] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)
    schema_version: int = 1

    def __post_init__(self):
        if len(self.columns) != len(self.dtypes):
            raise ValueError("one dtype per column required")
        for dt in self.dtypes:
            if dt not in ("str", "int", "float"):
                raise ValueError(f"unsupported column type {dt!r}")
        self.rows = [
            [_round12(cell) if dt == "float" else cell
             for cell, dt in zip(row, self.dtypes)]
            for row in self.rows
        ]

    def __eq__(self, other):
        return (isinstance(other, Table)
                and self.name == other.name
                and self.columns == other.columns
                and self.dtypes == other.dtypes
                and self.rows == other.rows
                and self.meta == other.meta
                and self.schema_version == other.schema_version)


def emit_report(table: Table, path, fmt: str = "csv") -> None:
    """Write a table as CSV (with # header comments) or JSON."""
    if fmt == "csv":
        lines = [f"# seqmargin-report v{table.schema_version}",
                 f"# name={table.name}",
                 f"# dtypes={','.join(table.dtypes)}"]
        for key in sorted(table.meta):
            lines.append(f"# meta.{key}={table.meta[key]}")
        lines.append(",".join(table.columns))
        for row in table.rows:
            lines.append(",".join(_format_cell(c, dt)
                                  for c, dt in zip(row, table.dtypes)))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    elif fmt == "json":
        payload = {
            "report": "seqmargin-report",
            "schema_version": table.schema_version,
            "name": table.name,
            "columns": table.columns,
            "dtypes": table.dtypes,
            "meta": table.meta,
            "rows": table.rows,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def parse_report(path, fmt: str | None = None) -> Table:
    """Inverse of emit_report; the format is sniffed when not given."""
    text = open(path, encoding="utf-8").read()
    if fmt is None:
        fmt = "json" if text.lstrip().startswith("{") else "csv"
    if fmt == "json":
        payload = json.loads(text)
        if payload.get("report") != "seqmargin-report":
            raise ValueError(f"{path}: not a seqmargin report")
        return Table(payload["name"], payload["columns"], payload["dtypes"],
                     payload["rows"], payload["meta"],
                     payload["schema_version"])
    version = 1
    name = ""
    dtypes: list[str] = []
    meta: dict[str, str] = {}
    columns: list[str] | None = None
    rows: list[list] = []
    for line in text.splitlines():
        if not line:
            continue
        if line.startswith("# "):
            body = line[2:]
            if body.startswith("seqmargin-report v"):
                version = int(body.rsplit("v", 1)[1])
            elif body.startswith("name="):
                name = body[5:]
            elif body.startswith("dtypes="):
                dtypes = body[7:].split(",")
            elif body.startswith("meta."):
                key, _, value = body[5:].partition("=")
                meta[key] = value
            continue
        if columns is None:
            columns = line.split(",")
            continue
        cells = line.split(",")
        rows.append([_parse_cell(c, dt) for c, dt in zip(cells, dtypes)])
    if columns is None:
        raise ValueError(f"{path}: no header row found")
    return Table(name, columns, dtypes, rows, meta, version)
