# Core Python imports.
import json
import math
import os
import sys
import tempfile

# Modify path so we can include the version of synpatch in this directory
# instead of relying on the user having it installed.
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

# 3rd party imports.
import numpy as np

# Import our package.
from synpatch.errors import MetricError, RegionError
from synpatch.intervention import HookPoint, Intervention, Scale
from synpatch.metrics import (
    BenchmarkPair,
    CellResult,
    Heatmap,
    PairProbabilities,
    assemble_heatmap,
    average_heatmaps,
    benchmark_accuracy,
    odds,
    odds_star,
    pair_odds,
    pair_odds_star,
    read_benchmark
)
from synpatch.sweep import sweep_probabilities
from tiny_model import tiny_model, tiny_pairs, tiny_tokenizer

def _raises(error, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except error:
        return True
    return False

#------------------------------------------------------------------------------
# Odds.

def test_pair_odds_by_hand():
    p = PairProbabilities.from_probabilities(0.8, 0.2, 0.6, 0.3)
    expected = math.log((0.8 / 0.2) * (0.6 / 0.3))
    assert abs(pair_odds(p) - expected) < 1e-12

    # No effect from the intervention: intervened equals clean.
    p = PairProbabilities.from_probabilities(0.8, 0.2, 0.2, 0.8)
    assert abs(pair_odds(p)) < 1e-12

def test_odds_star_by_hand():
    # 0.8 / 0.1 clean on b, 0.6 / 0.3 intervened.
    p = PairProbabilities.from_probabilities(0.8, 0.5, 0.5, 0.3, p_b_ys=0.1, pi_b_ys=0.6)
    assert abs(pair_odds_star(p) - math.log(16)) < 1e-12
    assert abs(odds_star([p, p]) - math.log(16)) < 1e-12
    assert _raises(MetricError, pair_odds_star, PairProbabilities.from_probabilities(0.8, 0.2, 0.6, 0.3))

def test_probability_errors():
    assert _raises(MetricError, PairProbabilities.from_probabilities, 0.0, 0.2, 0.6, 0.3)
    assert _raises(MetricError, PairProbabilities.from_probabilities, 1.5, 0.2, 0.6, 0.3)
    assert _raises(MetricError, PairProbabilities, 0.1, -1.0, -1.0, -1.0)
    assert _raises(MetricError, PairProbabilities, -math.inf, -1.0, -1.0, -1.0)
    assert _raises(MetricError, odds, [])

def test_odds_equals_odds_star_on_random_draws():
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(1000):
        p = PairProbabilities.from_probabilities(*[float(v) for v in rng.uniform(0.01, 1.0, 8)])
        pairs.extend([p, p.flip()])
    assert abs(math.fsum(pair_odds(p) for p in pairs) - math.fsum(pair_odds_star(p) for p in pairs)) < 1e-9
    assert abs(odds(pairs) - odds_star(pairs)) < 1e-12

def test_odds_equals_odds_star_on_model():
    model = tiny_model()
    tpairs = tiny_pairs("train") + tiny_pairs("id_test") + tiny_pairs("ood_test")
    symmetric = []
    for tpair in tpairs:
        symmetric.extend([tpair, tpair.flipped()])
    measured = 0
    for text in ("resid.0", "head.1.0", "mlp.1"):
        probabilities = sweep_probabilities(model, symmetric, HookPoint.parse(text))
        assert len(probabilities) == len(symmetric)
        measured += len(probabilities)
        total = math.fsum(pair_odds(p) for p in probabilities)
        total_star = math.fsum(pair_odds_star(p) for p in probabilities)
        assert abs(total - total_star) < 1e-9

        # The flipped pair's probabilities mirror the original's.
        first = probabilities[0].flip()
        assert abs(first.lp_b_yb - probabilities[1].lp_b_yb) < 1e-12
    assert measured >= 100

def test_null_and_total_interventions():
    model = tiny_model()
    tpairs = tiny_pairs()

    # Self pairs: b = s.
    selves = [t.__class__(t.pair, t.base, t.base, t.y_base, t.y_source, t.spans) for t in tpairs]
    for text in ("resid.0", "attn.1", "mlp.0", "head.0.1"):
        for p in sweep_probabilities(model, selves, HookPoint.parse(text)):
            assert abs(pair_odds(p)) < 1e-6

    last = HookPoint.parse(f"resid.{model.config.n_layers - 1}@-1")
    for p in sweep_probabilities(model, tpairs, last):
        assert abs(pair_odds(p) - 2 * (p.lp_b_yb - p.lp_s_yb)) < 1e-5

#------------------------------------------------------------------------------
# Heatmaps.

def _results(values):
    return [CellResult(r, c, i, v) for (r, c), vs in values.items() for i, v in enumerate(vs)]

def test_assemble_heatmap():
    values = {(0, 0): [1.0, 3.0], (0, 1): [2.0, None], (1, 0): [None, None], (1, 1): [0.5, 0.5]}
    results = _results(values)
    heatmap = assemble_heatmap(list(reversed(results)), [0, 1], ["-1", "filler"], metadata={"construction": "EWhK"})
    assert heatmap.shape == (2, 2)
    assert heatmap.mean(0, 0) == 2.0 and heatmap.count(0, 0) == 2
    assert heatmap.mean(0, 1) == 2.0 and heatmap.skips.Get(0, 1) == 1
    assert heatmap.mean(1, 0) is None and heatmap.count(1, 0) == 0
    assert assemble_heatmap(results, [0, 1], ["-1", "filler"]).means.GetRows() == heatmap.means.GetRows()

    assert _raises(MetricError, assemble_heatmap, [], [0], [0])
    ragged = results[:-1]
    assert _raises(MetricError, assemble_heatmap, ragged, [0, 1], ["-1", "filler"])

def test_heatmap_files():
    heatmap = assemble_heatmap(_results({(0, 0): [1.0], (0, 1): [None], (1, 0): [-0.25], (1, 1): [4.0]}), [0, 1], [0, 1], "layer_head", {"distribution": "id"})
    with tempfile.TemporaryDirectory() as directory:
        csv_path, json_path = heatmap.save(os.path.join(directory, "EWhK.head.id.csv"))
        with open(csv_path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines[0] == "layer,0,1"
        assert lines[1] == "0,1,"
        with open(json_path, "r", encoding="utf-8") as f:
            side = json.load(f)
        assert side["counts"] == [[1, 0], [1, 1]] and side["metadata"] == {"distribution": "id"}

        loaded = Heatmap.load(csv_path)
        assert loaded.means.GetRows() == heatmap.means.GetRows()

    other = assemble_heatmap(_results({(0, 0): [3.0], (0, 1): [2.0], (1, 0): [0.25], (1, 1): [None]}), [0, 1], [0, 1], "layer_head")
    average = average_heatmaps([heatmap, other])
    assert average.mean(0, 0) == 2.0 and average.mean(0, 1) == 2.0 and average.mean(1, 1) == 4.0
    assert average.count(0, 0) == 2

#------------------------------------------------------------------------------
# Benchmarks.

def _benchmark_file(directory, rows):
    path = os.path.join(directory, "bench.jsonl")
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return path

def test_benchmark_accuracy():
    model = tiny_model()
    tokenizer = tiny_tokenizer()
    rows = [
        {"sentence_good": "The man have seen any", "sentence_bad": "The man have seen some", "category": "npi"},
        {"sentence_good": "The man knows who the woman saw him", "sentence_bad": "The man knows who the woman saw her", "category": "fgd"},
        {"sentence_good": "The man saw", "sentence_bad": "The man saw him and then left", "category": "fgd"}
    ]
    with tempfile.TemporaryDirectory() as directory:
        pairs = read_benchmark(_benchmark_file(directory, rows))
    report = benchmark_accuracy(model, tokenizer, pairs)
    assert report.filtered == 1
    assert report.total == 2
    assert sum(total for _, total in report.categories.values()) == 2
    assert 0.0 <= report.accuracy <= 1.0

    # alpha 1 reproduces the baseline exactly.
    heads = [Intervention(HookPoint.parse("head.1.0@*"), Scale(1.0))]
    steered = benchmark_accuracy(model, tokenizer, pairs, interventions=heads)
    assert steered.to_dict() == report.to_dict()

def test_benchmark_accuracy_when_grammatical_always_wins():
    """ A model whose every position predicts " any" or " him".
    """
    model = tiny_model()
    tokenizer = tiny_tokenizer()
    model.ln_f_w.zero_()
    model.ln_f_b.fill_(1.0)
    model.unembed.zero_()
    for word in (" any", " him"):
        model.unembed[tokenizer.encode(word)[0]] = 10.0 / model.config.d_model

    pairs = [
        BenchmarkPair("The man have seen any", "The man have seen some", "npi"),
        BenchmarkPair("The man knows who the woman saw him", "The man knows who the woman saw her", "fgd")
    ]
    report = benchmark_accuracy(model, tokenizer, pairs)
    assert report.accuracy == 1.0
    assert report.categories == {"npi": (1, 1), "fgd": (1, 1)}

def test_benchmark_regions():
    model = tiny_model()
    tokenizer = tiny_tokenizer()
    pair = BenchmarkPair("No man have seen any", "The man have seen any", "npi", (1, 3), (1, 3))
    report = benchmark_accuracy(model, tokenizer, [pair], mode="region")
    assert report.total == 1

    outside = BenchmarkPair("No man", "The man", "npi", (1, 40), (1, 40))
    assert _raises(RegionError, benchmark_accuracy, model, tokenizer, [outside], mode="region")
    assert _raises(RegionError, benchmark_accuracy, model, tokenizer, [BenchmarkPair("No man", "The man")], mode="region")
    assert _raises(MetricError, benchmark_accuracy, model, tokenizer, [pair], mode="nope")

if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"{name} passed")
