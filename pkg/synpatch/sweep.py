""" Patching sweeps: odds for every (pair, grid cell), reduced to a Heatmap.

Each pair costs two clean passes (base and source, capturing every grid
hook point at once) plus two intervened passes per measured cell: the base
patched from the source and the source patched from the base.
"""

# Core Python imports.
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

# 3rd party imports.
from loguru import logger
import torch

# Local imports.
from .errors import AlignmentError, DatasetError
from .intervention import HookPoint, Intervention, Patch, PositionSpec, ProjectSwap, final_logprobs, resolve_positions, run_with, run_with_cache, tokenize_pair
from .metrics import CellResult, PairProbabilities, assemble_heatmap, pair_odds
from .transformer import EHookKind
from .utils import progress

@dataclass(frozen=True)
class SweepGrid:
    """ Heatmap axes plus the hook point behind each cell.
    """
    kind: str
    rows: tuple
    cols: tuple
    cells: dict = field(hash=False)

    def hookpoints(self):
        return [self.cells[key] for key in sorted(self.cells)]

def component_grid(kind, config, positions):
    """ layer x position grid for resid, attn or mlp.
    """
    kind = EHookKind(kind) if isinstance(kind, str) else kind
    specs = [PositionSpec.parse(p) if isinstance(p, str) else p for p in positions]
    cells = {
        (layer, col): HookPoint(kind, layer, position=spec)
        for layer in range(config.n_layers)
        for col, spec in enumerate(specs)
    }
    return SweepGrid("layer_position", tuple(range(config.n_layers)), tuple(str(s) for s in specs), cells)

def head_grid(config, position="-1"):
    """ layer x head grid at one position.
    """
    spec = PositionSpec.parse(position) if isinstance(position, str) else position
    cells = {
        (layer, head): HookPoint(EHookKind.HeadOut, layer, head, spec)
        for layer in range(config.n_layers)
        for head in range(config.n_heads)
    }
    return SweepGrid("layer_head", tuple(range(config.n_layers)), tuple(range(config.n_heads)), cells)

def hookpoint_grid(hookpoints):
    """ One row per hook point and a single column.
    """
    hookpoints = [HookPoint.parse(h) if isinstance(h, str) else h for h in hookpoints]
    cells = {(row, 0): hookpoint for row, hookpoint in enumerate(hookpoints)}
    return SweepGrid("hookpoint", tuple(str(h) for h in hookpoints), ("odds",), cells)

def tokenize_pairs(tokenizer, pairs):
    """ Tokenize pairs, dropping those with multi-token outputs.

    Returns (tokenized pairs, number excluded).
    """
    out = []
    excluded = 0
    for pair in pairs:
        try:
            out.append(tokenize_pair(tokenizer, pair))
        except DatasetError as e:
            excluded += 1
            logger.debug(f"Excluded '{pair.base}': {e}")
    if excluded:
        logger.warning(f"Excluded {excluded} pairs whose outputs aren't single tokens")
    return out, excluded

#------------------------------------------------------------------------------
# Per-pair measurement.

@dataclass
class CleanRun:
    """ Final-position log-probabilities and captures of both clean passes.
    """
    base_logprobs: torch.Tensor
    source_logprobs: torch.Tensor
    base_cache: dict
    source_cache: dict

def _resolvable(hookpoint, tpair):
    try:
        for side in ("base", "source"):
            resolve_positions(hookpoint.position, tpair, side)
    except AlignmentError:
        return False
    return True

def clean_run(model, tpair, hookpoints):
    """ The two clean passes of a pair, capturing every resolvable hook point.
    """
    usable = [h for h in hookpoints if _resolvable(h, tpair)]
    base_logits, base_cache = run_with_cache(model, tpair.base, usable, tpair, "base")
    source_logits, source_cache = run_with_cache(model, tpair.source, usable, tpair, "source")
    return CleanRun(final_logprobs(base_logits), final_logprobs(source_logits), base_cache, source_cache)

def _action(source, direction):
    return Patch(source) if direction is None else ProjectSwap(direction, source)

def measure_pair(model, tpair, hookpoint, clean, direction=None):
    """ PairProbabilities for one cell: plain patching, or a DAS projection
    swap when direction is given.

    Raises AlignmentError when the cell's position doesn't resolve on this pair.
    """
    if hookpoint not in clean.base_cache:
        raise AlignmentError(f"'{hookpoint}' doesn't resolve on '{tpair.pair.base}'")

    patched_base = run_with(model, tpair.base, [Intervention(hookpoint, _action(clean.source_cache[hookpoint], direction))], tpair, "base")
    patched_source = run_with(model, tpair.source, [Intervention(hookpoint, _action(clean.base_cache[hookpoint], direction))], tpair, "source")
    lib, lis = final_logprobs(patched_base), final_logprobs(patched_source)
    lb, ls = clean.base_logprobs, clean.source_logprobs
    yb, ys = tpair.y_base, tpair.y_source

    return PairProbabilities(
        lp_b_yb=float(lb[yb]),
        lp_s_yb=float(ls[yb]),
        lpi_s_yb=float(lis[yb]),
        lpi_b_yb=float(lib[yb]),
        lp_b_ys=float(lb[ys]),
        lp_s_ys=float(ls[ys]),
        lpi_b_ys=float(lib[ys]),
        lpi_s_ys=float(lis[ys])
    )

#------------------------------------------------------------------------------
# Sweeps.

def run_sweep(model, tpairs, grid, directions=None, workers=1, metadata=None, desc="sweep"):
    """ Odds heatmap over grid for a list of tokenized pairs.

    directions optionally maps cells to DAS direction vectors, switching
    those cells to projection swaps. Work units run on a thread pool; the
    reduction order is fixed, so results don't depend on workers.

    Returns (Heatmap, stats).
    """
    tpairs = list(tpairs)
    directions = directions or {}
    hookpoints = grid.hookpoints()

    def clean_unit(index):
        return clean_run(model, tpairs[index], hookpoints)

    def cell_unit(unit):
        index, cell = unit
        hookpoint = grid.cells[cell]
        try:
            probabilities = measure_pair(model, tpairs[index], hookpoint, cleans[index], directions.get(cell))
        except AlignmentError:
            return CellResult(cell[0], cell[1], index, None), None
        return CellResult(cell[0], cell[1], index, pair_odds(probabilities)), probabilities

    units = [(index, cell) for index in range(len(tpairs)) for cell in sorted(grid.cells)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        cleans = list(progress(pool.map(clean_unit, range(len(tpairs))), desc=f"{desc} (clean)", total=len(tpairs)))
        outcomes = list(progress(pool.map(cell_unit, units), desc=desc, total=len(units)))

    results = [result for result, _ in outcomes]
    measured = sum(1 for result in results if result.value is not None)
    stats = {
        "pairs": len(tpairs),
        "cells": len(grid.cells),
        "measured": measured,
        "skipped": len(results) - measured,
        "forward_passes": 2 * len(tpairs) + 2 * measured,
        "forward_passes_planned": len(tpairs) * (2 + 2 * len(grid.cells))
    }
    heatmap = assemble_heatmap(results, grid.rows, grid.cols, grid.kind, dict(metadata or {}, **stats))
    logger.info(f"{desc}: {stats['pairs']} pairs x {stats['cells']} cells, {stats['forward_passes']} forward passes, {stats['skipped']} skips")
    return heatmap, stats

def sweep_probabilities(model, tpairs, hookpoint, direction=None):
    """ PairProbabilities of every pair at one hook point (unresolvable pairs dropped).
    """
    out = []
    for tpair in tpairs:
        clean = clean_run(model, tpair, [hookpoint])
        try:
            out.append(measure_pair(model, tpair, hookpoint, clean, direction))
        except AlignmentError:
            continue
    return out
