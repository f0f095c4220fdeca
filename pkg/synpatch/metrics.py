""" Causal-effect metrics, heatmaps and acceptability benchmarks.

All probabilities are handled as log-probabilities. For a pair (b, s, y_b,
y_s), "intervened on b" means running b with activations patched from s.
"""

# Core Python imports.
from collections import defaultdict
from dataclasses import dataclass, field
import io
import json
import math
import os

# 3rd party imports.
from loguru import logger
import pandas as pd

# Local imports.
from .errors import DatasetError, MetricError, RegionError
from .intervention import build_edits
from .transformer import region_logprob, sequence_logprob
from .utils import Grid, dump_json, progress, write_atomic

#------------------------------------------------------------------------------
# Per-pair probabilities.

_fields = ("lp_b_yb", "lp_s_yb", "lpi_s_yb", "lpi_b_yb", "lp_b_ys", "lp_s_ys", "lpi_b_ys", "lpi_s_ys")

@dataclass(frozen=True)
class PairProbabilities:
    """ Log-probabilities for one pair.

    lp_x_y   is log p(y | x) on a clean run.
    lpi_x_y  is log p(y | x) running x patched from the other input.

    The y_s fields are only needed for odds_star and may be None.
    """
    lp_b_yb: float
    lp_s_yb: float
    lpi_s_yb: float
    lpi_b_yb: float
    lp_b_ys: float = None
    lp_s_ys: float = None
    lpi_b_ys: float = None
    lpi_s_ys: float = None

    def __post_init__(self):
        for name in _fields:
            value = getattr(self, name)
            if value is None:
                continue
            if math.isnan(value) or value == -math.inf:
                raise MetricError(f"{name} is {value}: zero or undefined probability")
            if value > 0:
                raise MetricError(f"{name} is {value}: log-probability above 0")

    @classmethod
    def from_probabilities(cls, p_b_yb, p_s_yb, pi_s_yb, pi_b_yb, p_b_ys=None, p_s_ys=None, pi_b_ys=None, pi_s_ys=None):
        values = (p_b_yb, p_s_yb, pi_s_yb, pi_b_yb, p_b_ys, p_s_ys, pi_b_ys, pi_s_ys)
        logs = []
        for name, p in zip(_fields, values):
            if p is None:
                logs.append(None)
            elif not (0 < p <= 1):
                raise MetricError(f"{name[1:]} = {p} is not a probability in (0, 1]")
            else:
                logs.append(math.log(p))
        return cls(*logs)

    def flip(self):
        """ Probabilities of the mirrored pair (s, b, y_s, y_b).
        """
        return PairProbabilities(
            lp_b_yb=self.lp_s_ys,
            lp_s_yb=self.lp_b_ys,
            lpi_s_yb=self.lpi_b_ys,
            lpi_b_yb=self.lpi_s_ys,
            lp_b_ys=self.lp_s_yb,
            lp_s_ys=self.lp_b_yb,
            lpi_b_ys=self.lpi_s_yb,
            lpi_s_ys=self.lpi_b_yb
        )

def pair_odds(p):
    """ log[(p(y_b|b) / p(y_b|s)) * (p_interv(y_b|s,b) / p_interv(y_b|b,s))]
    """
    return (p.lp_b_yb - p.lp_s_yb) + (p.lpi_s_yb - p.lpi_b_yb)

def pair_odds_star(p):
    """ log[(p(y_b|b) / p(y_s|b)) * (p_interv(y_s|b,s) / p_interv(y_b|b,s))]
    """
    if p.lp_b_ys is None or p.lpi_b_ys is None:
        raise MetricError("odds_star needs the y_s probabilities")
    return (p.lp_b_yb - p.lp_b_ys) + (p.lpi_b_ys - p.lpi_b_yb)

def _mean(values, what):
    values = list(values)
    if not values:
        raise MetricError(f"{what} over an empty test set")
    return math.fsum(values) / len(values)

def odds(probabilities):
    """ Mean per-pair odds over a test set.
    """
    return _mean((pair_odds(p) for p in probabilities), "odds")

def odds_star(probabilities):
    """ Mean per-pair odds_star over a test set.
    """
    return _mean((pair_odds_star(p) for p in probabilities), "odds_star")

#------------------------------------------------------------------------------
# Heatmaps.

@dataclass(frozen=True)
class CellResult:
    """ One (cell, pair) outcome of a sweep. value None records a skip.
    """
    row: int
    col: int
    pair: int
    value: float = None

@dataclass
class Heatmap:
    """ Mean odds per (layer, position) or (layer, head) cell.

    Cells where every pair was skipped hold None.
    """
    kind: str
    rows: list
    cols: list
    means: Grid
    counts: Grid
    skips: Grid
    metadata: dict = field(default_factory=dict)

    @property
    def shape(self):
        return (len(self.rows), len(self.cols))

    def mean(self, row, col):
        return self.means.Get(row, col)

    def count(self, row, col):
        return self.counts.Get(row, col)

    def to_frame(self):
        frame = pd.DataFrame(
            [[math.nan if v is None else v for v in row] for row in self.means.GetRows()],
            index=pd.Index(self.rows, name="hookpoint" if self.kind == "hookpoint" else "layer"),
            columns=[str(c) for c in self.cols]
        )
        return frame

    def sidecar(self):
        return {
            "kind": self.kind,
            "rows": list(self.rows),
            "cols": [str(c) for c in self.cols],
            "counts": self.counts.GetRows(),
            "skips": self.skips.GetRows(),
            "metadata": self.metadata
        }

    def save(self, csv_path):
        """ Write the matrix as CSV and counts/metadata as a JSON sidecar.

        Returns (csv_path, json_path).
        """
        buffer = io.StringIO()
        self.to_frame().to_csv(buffer, float_format="%.10g", lineterminator="\n")
        write_atomic(csv_path, buffer.getvalue())
        json_path = os.path.splitext(csv_path)[0] + ".json"
        write_atomic(json_path, dump_json(self.sidecar()))
        logger.success(f"Wrote heatmap {csv_path}")
        return csv_path, json_path

    @classmethod
    def load(cls, csv_path):
        json_path = os.path.splitext(csv_path)[0] + ".json"
        try:
            frame = pd.read_csv(csv_path, index_col=0)
            with open(json_path, "r", encoding="utf-8") as f:
                side = json.load(f)
        except (OSError, ValueError) as e:
            raise MetricError(f"can't read heatmap '{csv_path}': {e}") from e

        means, counts, skips = (Grid(len(side["rows"]), len(side["cols"])) for _ in range(3))
        for r in range(len(side["rows"])):
            for c in range(len(side["cols"])):
                value = frame.iat[r, c]
                means.Set(r, c, None if pd.isna(value) else float(value))
                counts.Set(r, c, side["counts"][r][c])
                skips.Set(r, c, side["skips"][r][c])
        return cls(side["kind"], side["rows"], side["cols"], means, counts, skips, side["metadata"])

def assemble_heatmap(results, rows, cols, kind="layer_position", metadata=None):
    """ Reduce per-(cell, pair) results to a Heatmap.

    Every cell must report the same set of pairs (a value or a skip).
    Reduction runs in (row, col, pair) order whatever the input order.
    """
    results = list(results)
    if not results:
        raise MetricError("empty sweep: no results to assemble")

    by_cell = defaultdict(dict)
    for result in results:
        if not (0 <= result.row < len(rows) and 0 <= result.col < len(cols)):
            raise MetricError(f"result for cell ({result.row}, {result.col}) outside a {len(rows)}x{len(cols)} grid")
        if result.pair in by_cell[(result.row, result.col)]:
            raise MetricError(f"two results for pair {result.pair} in cell ({result.row}, {result.col})")
        by_cell[(result.row, result.col)][result.pair] = result.value

    expected = None
    for row in range(len(rows)):
        for col in range(len(cols)):
            pairs = set(by_cell.get((row, col), {}))
            if expected is None:
                expected = pairs
            if pairs != expected:
                raise MetricError(f"ragged results: cell ({row}, {col}) has {len(pairs)} pairs, expected {len(expected)}")

    means, counts, skips = Grid(len(rows), len(cols)), Grid(len(rows), len(cols), 0), Grid(len(rows), len(cols), 0)
    for (row, col), values in sorted(by_cell.items()):
        kept = [values[p] for p in sorted(values) if values[p] is not None]
        counts.Set(row, col, len(kept))
        skips.Set(row, col, len(values) - len(kept))
        means.Set(row, col, math.fsum(kept) / len(kept) if kept else None)

    return Heatmap(kind, list(rows), list(cols), means, counts, skips, dict(metadata or {}))

def average_heatmaps(heatmaps, metadata=None):
    """ Cell-wise mean of heatmaps over the same axes (e.g. ID and OOD).

    Cells missing from some maps average the ones present.
    """
    heatmaps = list(heatmaps)
    if not heatmaps:
        raise MetricError("nothing to average")
    first = heatmaps[0]
    for other in heatmaps[1:]:
        if other.rows != first.rows or [str(c) for c in other.cols] != [str(c) for c in first.cols]:
            raise MetricError("can't average heatmaps with different axes")

    rows, cols = first.shape
    means, counts, skips = Grid(rows, cols), Grid(rows, cols, 0), Grid(rows, cols, 0)
    for r, c in means.Positions():
        present = [h.mean(r, c) for h in heatmaps if h.mean(r, c) is not None]
        means.Set(r, c, math.fsum(present) / len(present) if present else None)
        counts.Set(r, c, sum(h.count(r, c) for h in heatmaps))
        skips.Set(r, c, sum(h.skips.Get(r, c) for h in heatmaps))
    return Heatmap(first.kind, list(first.rows), list(first.cols), means, counts, skips, dict(metadata or first.metadata))

#------------------------------------------------------------------------------
# Acceptability benchmarks.

@dataclass(frozen=True)
class BenchmarkPair:
    """ Grammatical/ungrammatical sentences. Regions are [start, end)
    token spans used in region mode.
    """
    sentence_good: str
    sentence_bad: str
    category: str = ""
    region_good: tuple = None
    region_bad: tuple = None

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                sentence_good=data["sentence_good"],
                sentence_bad=data["sentence_bad"],
                category=data.get("category", data.get("UID", "")),
                region_good=tuple(data["region_good"]) if data.get("region_good") is not None else None,
                region_bad=tuple(data["region_bad"]) if data.get("region_bad") is not None else None
            )
        except (KeyError, TypeError) as e:
            raise DatasetError(f"malformed benchmark pair {data!r}: {e}") from e

def read_benchmark(path):
    """ Read a benchmark JSONL file.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DatasetError(f"can't read benchmark '{path}': {e}") from e

    pairs = []
    for number, line in enumerate(lines, 1):
        if line.strip():
            try:
                pairs.append(BenchmarkPair.from_dict(json.loads(line)))
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{number}: {e}") from e
    return pairs

@dataclass
class BenchmarkReport:
    accuracy: float
    correct: int
    total: int
    filtered: int
    categories: dict

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "filtered": self.filtered,
            "categories": {k: {"correct": v[0], "total": v[1]} for k, v in sorted(self.categories.items())}
        }

def _score(model, tokens, region, mode, interventions):
    edits = build_edits(model, len(tokens), interventions)
    if mode == "whole":
        return sequence_logprob(model, tokens, edits=edits)
    if region is None:
        raise RegionError("region mode needs a region span on both sentences")
    start, end = region
    return region_logprob(model, tokens, start, end, edits=edits)

def benchmark_accuracy(model, tokenizer, pairs, mode="whole", interventions=()):
    """ Fraction of pairs whose grammatical sentence scores strictly higher.

    whole: summed log-probability of the sentence; pairs whose sentences
    tokenize to different lengths are filtered out and counted.
    region: summed log-probability over each sentence's region span.
    interventions apply to both sentences; use '*' positions.
    """
    if mode not in ("whole", "region"):
        raise MetricError(f"unknown benchmark mode '{mode}'")

    correct = 0
    total = 0
    filtered = 0
    categories = defaultdict(lambda: [0, 0])
    for pair in progress(pairs, desc=f"benchmark ({mode})"):
        good = tokenizer.encode(pair.sentence_good)
        bad = tokenizer.encode(pair.sentence_bad)
        if mode == "whole" and len(good) != len(bad):
            filtered += 1
            continue

        good_score = _score(model, good, pair.region_good, mode, interventions)
        bad_score = _score(model, bad, pair.region_bad, mode, interventions)

        # Ties count as failures.
        won = good_score > bad_score
        correct += int(won)
        total += 1
        categories[pair.category][0] += int(won)
        categories[pair.category][1] += 1

    if total == 0:
        raise MetricError(f"no benchmark pairs left to score ({filtered} filtered)")
    if filtered:
        logger.warning(f"Filtered {filtered} pairs with unequal tokenized lengths")
    return BenchmarkReport(
        accuracy=correct / total,
        correct=correct,
        total=total,
        filtered=filtered,
        categories={k: tuple(v) for k, v in categories.items()}
    )
