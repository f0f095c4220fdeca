# Core Python imports.
from dataclasses import replace
import json
import os
import sys
import tempfile

# Modify path so we can include the version of synpatch in this directory
# instead of relying on the user having it installed.
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

# 3rd party imports.
import torch

# Import our package.
from synpatch.das import (
    DasDirection,
    DasTrainConfig,
    das_grad,
    das_loss,
    initial_direction,
    leave_one_out,
    lr_at,
    train_direction
)
from synpatch.datagen import MinimalPair
from synpatch.errors import ConfigError, DivergenceError, InterventionError, TapeError
from synpatch.intervention import HookPoint, TokenizedPair
from synpatch.sweep import hookpoint_grid
from tiny_model import tiny_constructions, tiny_model, tiny_pairs

def _raises(error, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except error:
        return True
    return False

def _selves(tpairs):
    return [t.__class__(t.pair, t.base, t.base, t.y_base, t.y_source, t.spans) for t in tpairs]

#------------------------------------------------------------------------------
# Configuration.

def test_config():
    cfg = DasTrainConfig()
    assert (cfg.lr, cfg.warmup, cfg.batch_size, cfg.steps) == (5e-3, 0.1, 4, 100)
    assert _raises(ConfigError, DasTrainConfig, lr=0)
    assert _raises(ConfigError, DasTrainConfig, warmup=1.5)
    assert _raises(ConfigError, DasTrainConfig, batch_size=0)
    assert _raises(ConfigError, DasTrainConfig, steps=-1)

def test_lr_schedule():
    cfg = DasTrainConfig(lr=0.01, warmup=0.1, steps=100)
    assert abs(lr_at(0, cfg) - 0.001) < 1e-15
    assert abs(lr_at(4, cfg) - 0.005) < 1e-15
    assert abs(lr_at(9, cfg) - 0.01) < 1e-15
    assert lr_at(10, cfg) == 0.01 and lr_at(99, cfg) == 0.01
    assert lr_at(0, DasTrainConfig(lr=0.01, warmup=0.0)) == 0.01

def test_initial_direction():
    a = initial_direction(16, 7)
    assert abs(float(a.norm()) - 1.0) < 1e-12
    assert torch.equal(a, initial_direction(16, 7))
    assert not torch.equal(a, initial_direction(16, 8))
    assert initial_direction(16, 7, torch.float32).dtype == torch.float32

#------------------------------------------------------------------------------
# Loss and gradient.

def test_loss_matches_gradient_pass():
    model = tiny_model()
    tpair = tiny_pairs(construction="EWhK")[0]
    hookpoint = HookPoint.parse("resid.0@-1")
    a = initial_direction(model.config.d_model, 0)
    loss = das_loss(model, tpair, hookpoint, a)
    assert loss >= 0
    _, tape_loss = das_grad(model, [tpair], hookpoint, a)
    assert abs(tape_loss - loss) < 1e-9

def test_gradient_vanishes_on_self_pairs():
    model = tiny_model()
    selves = _selves(tiny_pairs()[:3])
    hookpoint = HookPoint.parse("mlp.0@-1")
    grad, _ = das_grad(model, selves, hookpoint, initial_direction(model.config.d_model, 1))
    assert float(grad.abs().max()) == 0.0

def _check_gradient(model, tpair, hookpoint, a, h=1e-4):
    grad, _ = das_grad(model, [tpair], hookpoint, a)
    for i in range(a.numel()):
        step = torch.zeros_like(a)
        step[i] = h
        up = das_loss(model, tpair, hookpoint, a + step, require_unit=False)
        down = das_loss(model, tpair, hookpoint, a - step, require_unit=False)
        numeric = (up - down) / (2 * h)
        assert abs(float(grad[i]) - numeric) <= 1e-5 + 1e-4 * abs(numeric), (str(hookpoint), i)

def test_gradient_matches_finite_differences():
    """ 3 model seeds x 2 pairs x 2 hook points, a fresh unit a per draw.
    """
    tpairs = tiny_pairs(construction="EWhK")[:2]
    draws = 0
    for model_seed in (0, 1, 2):
        model = tiny_model(seed=model_seed)
        for text, width in (("resid.0@-1", model.config.d_model), ("head.1.0@-1", model.config.d_head)):
            hookpoint = HookPoint.parse(text)
            for index, tpair in enumerate(tpairs):
                a = initial_direction(width, 100 * model_seed + 10 * index + width)
                _check_gradient(model, tpair, hookpoint, a)
                draws += 1
    assert draws >= 10

def test_duplicated_batch():
    model = tiny_model()
    tpair = tiny_pairs(construction="DNeg")[0]
    hookpoint = HookPoint.parse("attn.1@-1")
    a = initial_direction(model.config.d_model, 2)
    single, single_loss = das_grad(model, [tpair], hookpoint, a)
    double, double_loss = das_grad(model, [tpair, tpair], hookpoint, a)
    assert torch.allclose(single, double, atol=1e-12)
    assert abs(single_loss - double_loss) < 1e-12
    assert _raises(TapeError, das_grad, model, [], hookpoint, a)

#------------------------------------------------------------------------------
# Training.

def test_zero_steps_returns_initial_direction():
    model = tiny_model()
    hookpoint = HookPoint.parse("resid.1")
    direction = train_direction(model, tiny_pairs("train"), hookpoint, DasTrainConfig(steps=0, seed=5))
    assert torch.equal(direction.vector, initial_direction(model.config.d_model, 5))
    assert direction.loss_trace == []
    assert _raises(ConfigError, train_direction, model, [], hookpoint)

def test_training_is_deterministic_and_unit():
    model = tiny_model()
    pairs = tiny_pairs("train")
    hookpoint = HookPoint.parse("head.0.1@-1")
    cfg = DasTrainConfig(lr=0.05, steps=4, batch_size=3, seed=1)
    first = train_direction(model, pairs, hookpoint, cfg, ["EWhK", "DNeg"])
    second = train_direction(model, pairs, hookpoint, cfg, ["EWhK", "DNeg"])
    assert torch.equal(first.vector, second.vector)
    assert first.loss_trace == second.loss_trace
    assert len(first.loss_trace) == 4
    assert abs(first.norm - 1.0) < 1e-9
    assert first.config["steps"] == 4 and first.constructions == ["EWhK", "DNeg"]

def _planted_task(seed=0):
    """ Zeroed layers, so the final residual is the last token's embedding.

    Base sentences end in a token embedded at -3u and source sentences in
    one at +3u; the unembedding reads only u, so y_s is decodable from the
    1-D difference along u. u overlaps the initial direction by about 0.55.
    """
    model = tiny_model(d_model=8, rotary_fraction=0.5)
    cfg = model.config
    for layer in model.layers:
        for weight in (layer.w_o, layer.b_o, layer.w_out, layer.b_out):
            weight.zero_()
    model.ln_f_w.fill_(1.0)
    model.ln_f_b.zero_()

    a0 = initial_direction(cfg.d_model, seed)
    r = torch.randn(cfg.d_model, generator=torch.Generator().manual_seed(11), dtype=torch.float64)
    r = r - torch.dot(r, a0) * a0
    u = a0 + 1.5 * r / r.norm()
    u = u - u.mean()
    u = u / u.norm()

    yes, no = 1, 2
    unembed = torch.zeros_like(model.unembed)
    unembed[yes] = 4.0 * u
    unembed[no] = -4.0 * u
    embed = 0.05 * torch.randn(cfg.vocab_size, cfg.d_model, generator=torch.Generator().manual_seed(12), dtype=torch.float64)
    pairs = []
    for i in range(4):
        low, high = 10 + i, 20 + i
        embed[low] -= 3.0 * u
        embed[high] += 3.0 * u
        pair = MinimalPair(f"x{i} low", f"x{i} high", "no", "yes", "Ctrl")
        pairs.append(TokenizedPair(pair, (30 + i, low), (30 + i, high), no, yes, {}))
    return replace(model, embed=embed, unembed=unembed), pairs

def test_training_descends_on_planted_task():
    model, pairs = _planted_task()
    hookpoint = HookPoint.parse(f"resid.{model.config.n_layers - 1}@-1")
    cfg = DasTrainConfig(lr=5e-3, warmup=0.1, batch_size=4, steps=100, seed=0)
    direction = train_direction(model, pairs, hookpoint, cfg)

    def mean_loss(a):
        return sum(das_loss(model, tpair, hookpoint, a) for tpair in pairs) / len(pairs)

    before = mean_loss(initial_direction(model.config.d_model, 0))
    after = mean_loss(direction.vector)
    assert abs(direction.loss_trace[0] - before) < 1e-9
    assert after <= 0.5 * before, (before, after)
    assert train_direction(model, pairs, hookpoint, cfg).loss_trace == direction.loss_trace

def test_divergence():
    model = tiny_model()
    model.unembed.fill_(float("nan"))
    try:
        train_direction(model, tiny_pairs("train"), HookPoint.parse("resid.0"), DasTrainConfig(steps=3))
        assert False
    except DivergenceError as e:
        assert len(e.trace) == 1 and e.trace[0] != e.trace[0]

def test_direction_files():
    model = tiny_model()
    direction = train_direction(model, tiny_pairs("train"), HookPoint.parse("mlp.1"), DasTrainConfig(steps=2, batch_size=2))
    with tempfile.TemporaryDirectory() as directory:
        path = direction.save(os.path.join(directory, "mlp.1.direction.json"))
        loaded = DasDirection.load(path)
        assert loaded.hookpoint == direction.hookpoint
        assert torch.allclose(loaded.vector, direction.vector.double(), atol=1e-15)
        assert loaded.loss_trace == direction.loss_trace

        # Norm drift is rejected.
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        data["vector"] = [2 * v for v in data["vector"]]
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f)
        assert _raises(InterventionError, DasDirection.load, path)

        with open(path, "w", encoding="utf-8") as f:
            f.write("{}")
        assert _raises(ConfigError, DasDirection.load, path)

#------------------------------------------------------------------------------
# Leave-one-out.

def _data(constructions):
    return {c: {part: tiny_pairs(part, c) for part in ("train", "id_test", "ood_test")} for c in constructions}

def test_leave_one_out():
    model = tiny_model()
    grid = hookpoint_grid(["resid.0@-1"])
    cfg = DasTrainConfig(steps=2, batch_size=2)
    assert _raises(ConfigError, leave_one_out, model, _data(["EWhK"]), grid, cfg)

    plan = leave_one_out(model, _data(tiny_constructions), grid, cfg)
    assert [fold.held_out for fold in plan.folds] == list(tiny_constructions)
    for index, fold in enumerate(plan.folds):
        held_out, train_constructions = plan.fold_plan(index)
        assert fold.held_out == held_out
        assert fold.train_constructions == train_constructions
        assert held_out not in train_constructions
        assert fold.directions[(0, 0)].constructions == train_constructions
        assert set(fold.heatmaps) == {"id", "ood", "avg"}
        assert fold.heatmaps["id"].metadata["held_out"] == held_out
        assert fold.heatmaps["avg"].metadata["distribution"] == "avg"
        assert fold.heatmaps["id"].count(0, 0) == len(tiny_pairs("id_test", held_out))

if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"{name} passed")
