""" One-dimensional distributed alignment search (DAS).

A unit direction a at a hook point is trained so that swapping the base
run's component along a for the source run's,

    f_interv = f_b + (<f_s, a> - <f_b, a>) a

makes the base run predict the source output y_s. The gradient over a goes
through the suffix of the network after the hook point only:

    g      = dL/df_interv            (SuffixTape from the hook point to the loss)
    dL/da  = <g, a> (f_s - f_b) + <f_s - f_b, a> g
"""

# Core Python imports.
from dataclasses import asdict, dataclass, field
import json
import math

# 3rd party imports.
from loguru import logger
import numpy as np
import torch

# Local imports.
from .errors import ConfigError, DivergenceError, InterventionError, NonFiniteError, TapeError
from .intervention import HookPoint, Intervention, ProjectSwap, capture, das_apply, final_logprobs, replace_positions, resolve_position, run_with
from .metrics import average_heatmaps
from .sweep import run_sweep
from .tensor import SuffixTape, log_softmax_lastdim, vjp_seed_gradient
from .transformer import forward
from .utils import dump_json, progress, write_atomic

#------------------------------------------------------------------------------
# Configuration.

@dataclass(frozen=True)
class DasTrainConfig:
    """ DAS hyperparameters. Defaults: lr 5e-3, 10% linear warmup, batch 4,
    100 steps.
    """
    lr: float = 5e-3
    warmup: float = 0.1
    batch_size: int = 4
    steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.warmup <= 1):
            raise ConfigError(f"warmup must be in [0, 1], got {self.warmup}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps can't be negative, got {self.steps}")

    def to_dict(self):
        return asdict(self)

def lr_at(step, cfg):
    """ Learning rate at 0-based step: linear warmup, then constant.
    """
    warmup_steps = int(round(cfg.warmup * cfg.steps))
    if step < warmup_steps:
        return cfg.lr * (step + 1) / warmup_steps
    return cfg.lr

#------------------------------------------------------------------------------
# Directions.

@dataclass
class DasDirection:
    hookpoint: HookPoint
    vector: torch.Tensor
    loss_trace: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    constructions: list = field(default_factory=list)

    @property
    def norm(self):
        return float(torch.linalg.vector_norm(self.vector.double()))

    def to_dict(self):
        return {
            "hookpoint": str(self.hookpoint),
            "vector": [float(v) for v in self.vector.double()],
            "norm": self.norm,
            "config": self.config,
            "seed": self.seed,
            "loss_trace": [float(v) for v in self.loss_trace],
            "constructions": list(self.constructions)
        }

    def save(self, path):
        write_atomic(path, dump_json(self.to_dict()))
        return path

    @classmethod
    def load(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
            direction = cls(
                hookpoint=HookPoint.parse(data["hookpoint"]),
                vector=torch.tensor(data["vector"], dtype=torch.float64),
                loss_trace=list(data.get("loss_trace", [])),
                config=dict(data.get("config", {})),
                seed=int(data.get("seed", 0)),
                constructions=list(data.get("constructions", []))
            )
        except (OSError, KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"can't read direction '{path}': {e}") from e
        if abs(direction.norm - 1.0) > 1e-6:
            raise InterventionError(f"direction in '{path}' has norm {direction.norm}, expected 1")
        return direction

def initial_direction(width, seed, dtype=torch.float64):
    """ Unit-normalised Gaussian draw.
    """
    generator = torch.Generator().manual_seed(seed)
    a = torch.randn(width, generator=generator, dtype=torch.float64)
    return (a / torch.linalg.vector_norm(a)).to(dtype)

#------------------------------------------------------------------------------
# Loss and gradient.

def das_loss(model, tpair, hookpoint, a, require_unit=True):
    """ -log p_interv(y_s | b, s) with a projection swap at hookpoint.
    """
    f_s = capture(model, tpair.source, [hookpoint], tpair, "source")[hookpoint]
    action = ProjectSwap(a, f_s, require_unit)
    logits = run_with(model, tpair.base, [Intervention(hookpoint, action)], tpair, "base")
    return -float(final_logprobs(logits)[tpair.y_source])

def _pair_gradient(model, tpair, hookpoint, a):
    """ (dL/da, L) for one pair.
    """
    f_s = capture(model, tpair.source, [hookpoint], tpair, "source")[hookpoint]
    f_b = capture(model, tpair.base, [hookpoint], tpair, "base")[hookpoint]
    position = resolve_position(hookpoint.position, tpair, "base")
    site = hookpoint.site
    base = list(tpair.base)

    def suffix(seed):
        edits = {site: lambda value: replace_positions(value, [position], seed)}
        logits, _ = forward(model, base, edits=edits)
        return -log_softmax_lastdim(logits[-1])[tpair.y_source]

    tape = SuffixTape(suffix, das_apply(f_b, f_s, a, require_unit=False), site=str(hookpoint))
    loss = tape.record()
    g = vjp_seed_gradient(tape, loss)

    delta = f_s - f_b
    grad = torch.dot(g, a) * delta + torch.dot(delta, a) * g
    return grad, float(loss.detach())

def das_grad(model, batch, hookpoint, a):
    """ Mean dL/da over a batch of tokenized pairs. Returns (gradient, mean loss).
    """
    batch = list(batch)
    if not batch:
        raise TapeError("das_grad on an empty batch")
    a = a.detach().to(model.dtype)
    grads = []
    losses = []
    for tpair in batch:
        grad, loss = _pair_gradient(model, tpair, hookpoint, a)
        grads.append(grad)
        losses.append(loss)
    return torch.stack(grads).mean(0), sum(losses) / len(losses)

#------------------------------------------------------------------------------
# Training.

class _Batches:
    """ Cycles through a seeded shuffle of the training pairs.
    """

    def __init__(self, count, batch_size, seed):
        self.rng = np.random.default_rng(seed)
        self.count = count
        self.batch_size = batch_size
        self.order = []

    def next(self):
        out = []
        while len(out) < self.batch_size:
            if not self.order:
                self.order = [int(i) for i in self.rng.permutation(self.count)]
            out.append(self.order.pop(0))
        return out

def train_direction(model, train_pairs, hookpoint, cfg=None, constructions=()):
    """ Train a unit direction at hookpoint on tokenized train pairs.

    Adam (0.9, 0.999, 1e-8) with linear warmup then constant lr; the
    direction is renormalised after every step. A NaN loss raises
    DivergenceError carrying the trace so far.
    """
    cfg = cfg or DasTrainConfig()
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise ConfigError("train_direction needs at least one training pair")
    hookpoint = hookpoint.validate(model.config)
    width = hookpoint.site.width(model.config)

    param = torch.nn.Parameter(initial_direction(width, cfg.seed, model.dtype))
    optimizer = torch.optim.Adam([param], lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: lr_at(step, cfg) / cfg.lr)
    batches = _Batches(len(train_pairs), cfg.batch_size, cfg.seed)

    trace = []
    for step in progress(range(cfg.steps), desc=f"das {hookpoint}"):
        batch = [train_pairs[i] for i in batches.next()]
        try:
            grad, loss = das_grad(model, batch, hookpoint, param.detach())
        except NonFiniteError as e:
            trace.append(float("nan"))
            raise DivergenceError(f"DAS at '{hookpoint}' diverged at step {step}: {e}", trace) from e
        trace.append(loss)
        if not math.isfinite(loss) or not bool(torch.isfinite(grad).all()):
            raise DivergenceError(f"DAS at '{hookpoint}' diverged at step {step}", trace)

        optimizer.zero_grad()
        param.grad = grad.to(param.dtype)
        optimizer.step()
        scheduler.step()
        with torch.no_grad():
            param.div_(torch.linalg.vector_norm(param))
        logger.debug(f"step {step}: loss {loss:.6f}, lr {lr_at(step, cfg):.2e}")

    if trace:
        logger.info(f"DAS at '{hookpoint}': loss {trace[0]:.4f} -> {trace[-1]:.4f} over {cfg.steps} steps")
    return DasDirection(
        hookpoint=hookpoint,
        vector=param.detach().clone(),
        loss_trace=trace,
        config=cfg.to_dict(),
        seed=cfg.seed,
        constructions=list(constructions)
    )

#------------------------------------------------------------------------------
# Leave-one-out.

@dataclass
class LeaveOneOutFold:
    """ One fold: directions trained without held_out and its test heatmaps.
    """
    held_out: str
    train_constructions: list
    directions: dict
    heatmaps: dict

@dataclass
class LeaveOneOutPlan:
    constructions: list
    folds: list = field(default_factory=list)

    def fold_plan(self, index):
        """ (held-out construction, training constructions) for fold index.
        """
        held_out = self.constructions[index]
        return held_out, [c for c in self.constructions if c != held_out]

def leave_one_out(model, data, grid, cfg=None, workers=1):
    """ Train on all constructions but one, evaluate on the one held out.

    data maps construction -> {"train": [...], "id_test": [...],
    "ood_test": [...]} of tokenized pairs; grid is a SweepGrid, one
    direction is trained per cell. Each fold gets "id", "ood" and "avg"
    heatmaps.
    """
    cfg = cfg or DasTrainConfig()
    plan = LeaveOneOutPlan(list(data))
    if len(plan.constructions) < 2:
        raise ConfigError(f"leave-one-out needs at least 2 constructions, got {plan.constructions}")

    for index in range(len(plan.constructions)):
        held_out, train_constructions = plan.fold_plan(index)
        train_pairs = [p for c in train_constructions for p in data[c]["train"]]
        logger.info(f"Fold {index}: holding out {held_out}, training on {len(train_pairs)} pairs")

        directions = {}
        for cell in sorted(grid.cells):
            directions[cell] = train_direction(model, train_pairs, grid.cells[cell], cfg, train_constructions)
        vectors = {cell: d.vector for cell, d in directions.items()}

        heatmaps = {}
        for distribution, part in (("id", "id_test"), ("ood", "ood_test")):
            metadata = {"held_out": held_out, "train_constructions": train_constructions, "distribution": distribution}
            heatmaps[distribution], _ = run_sweep(model, data[held_out][part], grid, vectors, workers, metadata, desc=f"das {held_out} {distribution}")
        heatmaps["avg"] = average_heatmaps([heatmaps["id"], heatmaps["ood"]], dict(heatmaps["id"].metadata, distribution="avg"))

        plan.folds.append(LeaveOneOutFold(held_out, train_constructions, directions, heatmaps))
    return plan
