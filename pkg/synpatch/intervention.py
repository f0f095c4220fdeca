""" Activation patching, DAS projection swaps and activation scaling.

A HookPoint is a transformer Site plus a token position:

    resid.L@pos   attn.L@pos   mlp.L@pos   head.L.H@pos

pos is an integer from the left, a negative integer from the right (-1 is
the final token), a slot name from the pair's alignment map, or * for every
position. Without @pos the final token is used.

Example:

    hookpoint = HookPoint.parse("head.7.5@-1")
    cache = capture(model, tpair.source, [hookpoint], tpair, side="source")
    logits = run_with(model, tpair.base, [Intervention(hookpoint, Patch(cache[hookpoint]))], tpair, side="base")
"""

# Core Python imports.
from dataclasses import dataclass, field, replace
from enum import Enum
import re

# 3rd party imports.
import torch

# Local imports.
from .datagen import continuation_text
from .errors import AlignmentError, DatasetError, HookPointError, InterventionError, ShapeError
from .tensor import log_softmax_lastdim
from .transformer import ActivationCache, EHookKind, Site, forward

#------------------------------------------------------------------------------
# Constants.

# Tolerance on the Euclidean norm of a projection direction.
unit_tolerance = 1e-6

_hook_pattern = re.compile(r"^(resid|attn|mlp|head)\.(\d+)(?:\.(\d+))?(?:@(.+))?$")
_slot_pattern = re.compile(r"^[A-Za-z_]\w*$")

#------------------------------------------------------------------------------
# Positions and hook points.

class EPositionKind(Enum):
    Absolute = "absolute"
    FromRight = "from_right"
    Slot = "slot"
    All = "all"

@dataclass(frozen=True)
class PositionSpec:
    kind: EPositionKind
    value: object = None

    @classmethod
    def parse(cls, text):
        text = text.strip()
        if text == "*":
            return cls(EPositionKind.All)
        if re.fullmatch(r"-?\d+", text):
            index = int(text)
            return cls(EPositionKind.FromRight if index < 0 else EPositionKind.Absolute, index)
        if _slot_pattern.match(text):
            return cls(EPositionKind.Slot, text)
        raise HookPointError(f"bad position '{text}'")

    def __str__(self):
        return "*" if self.kind is EPositionKind.All else str(self.value)

final_token = PositionSpec(EPositionKind.FromRight, -1)
all_positions = PositionSpec(EPositionKind.All)

@dataclass(frozen=True)
class HookPoint:
    kind: EHookKind
    layer: int
    head: int = None
    position: PositionSpec = final_token

    @classmethod
    def parse(cls, text):
        match = _hook_pattern.match(text.strip())
        if match is None:
            raise HookPointError(f"bad hook point '{text}'")
        kind, layer, head, position = match.groups()
        kind = EHookKind(kind)
        if (head is None) == (kind is EHookKind.HeadOut):
            raise HookPointError(f"bad hook point '{text}': head sites take 'head.L.H', others 'kind.L'")
        return cls(
            kind=kind,
            layer=int(layer),
            head=None if head is None else int(head),
            position=final_token if position is None else PositionSpec.parse(position)
        )

    def __str__(self):
        return f"{self.site}@{self.position}"

    @property
    def site(self):
        return Site(self.kind, self.layer, self.head)

    def at(self, position):
        """ Copy at another position (a PositionSpec or its string form).
        """
        if isinstance(position, str):
            position = PositionSpec.parse(position)
        return replace(self, position=position)

    def validate(self, config):
        try:
            self.site.validate(config)
        except HookPointError as e:
            raise HookPointError(f"'{self}': {e}") from e
        return self

#------------------------------------------------------------------------------
# Tokenized pairs.

@dataclass(frozen=True)
class TokenizedPair:
    """ A MinimalPair as token ids.

    spans maps slot name -> {"base": (start, end), "source": (start, end)}
    token index ranges.
    """
    pair: object
    base: tuple
    source: tuple
    y_base: int
    y_source: int
    spans: dict = field(default_factory=dict, hash=False)

    def tokens(self, side):
        return self.base if side == "base" else self.source

    def flipped(self):
        spans = {slot: {"base": s["source"], "source": s["base"]} for slot, s in self.spans.items()}
        return TokenizedPair(self.pair.flipped(), self.source, self.base, self.y_source, self.y_base, spans)

def _single_token(tokenizer, y):
    ids = tokenizer.encode(continuation_text(y))
    if len(ids) != 1:
        raise DatasetError(f"output '{y}' is {len(ids)} tokens, not 1")
    return ids[0]

def _token_span(offsets, text, char_span):
    """ Token index range covering a character span.
    """
    start = len(text[:char_span[0]].encode("utf-8"))
    end = len(text[:char_span[1]].encode("utf-8"))
    covered = [i for i, (_, b0, b1) in enumerate(offsets) if b0 < end and b1 > start]
    if covered:
        return (covered[0], covered[-1] + 1)
    after = next((i for i, (_, b0, _) in enumerate(offsets) if b0 >= start), len(offsets))
    return (after, after)

def tokenize_pair(tokenizer, pair):
    """ Tokenize both sides of a pair and map slot spans onto tokens.

    Raises DatasetError when y_base or y_source isn't a single token.
    """
    base_offsets = tokenizer.encode_with_offsets(pair.base)
    source_offsets = tokenizer.encode_with_offsets(pair.source)
    spans = {
        slot: {
            "base": _token_span(base_offsets, pair.base, s["base"]),
            "source": _token_span(source_offsets, pair.source, s["source"])
        }
        for slot, s in pair.alignment.items()
    }
    return TokenizedPair(
        pair=pair,
        base=tuple(t for t, _, _ in base_offsets),
        source=tuple(t for t, _, _ in source_offsets),
        y_base=_single_token(tokenizer, pair.y_base),
        y_source=_single_token(tokenizer, pair.y_source),
        spans=spans
    )

def resolve_position(spec, tpair, side):
    """ Absolute token index of spec on one side of a tokenized pair.

    Slot positions use the last token of the slot and need the slot to span
    the same number of tokens on both sides. Left indices need both sides to
    have the same length.
    """
    length = len(tpair.tokens(side))
    if spec.kind is EPositionKind.All:
        raise AlignmentError("'*' addresses every position, not one index")

    if spec.kind is EPositionKind.FromRight:
        index = length + spec.value
    elif spec.kind is EPositionKind.Absolute:
        if len(tpair.base) != len(tpair.source):
            raise AlignmentError(
                f"position {spec.value} from the left is ambiguous: sides have {len(tpair.base)} and {len(tpair.source)} tokens"
            )
        index = spec.value
    else:
        if spec.value not in tpair.spans:
            raise AlignmentError(f"pair has no slot '{spec.value}'")
        spans = tpair.spans[spec.value]
        counts = {s: spans[s][1] - spans[s][0] for s in ("base", "source")}
        if counts["base"] != counts["source"]:
            raise AlignmentError(
                f"slot '{spec.value}' spans {counts['base']} base tokens but {counts['source']} source tokens"
            )
        if counts[side] == 0:
            raise AlignmentError(f"slot '{spec.value}' is empty")
        index = spans[side][1] - 1

    if not (0 <= index < length):
        raise AlignmentError(f"position {spec} is outside a {length}-token sequence")
    return index

def resolve_positions(spec, tpair, side, length=None):
    """ List of indices; every position for '*'.

    Without a pair only numeric positions and '*' can be resolved, against
    length.
    """
    if spec.kind is EPositionKind.All:
        return list(range(len(tpair.tokens(side)) if tpair is not None else length))
    if tpair is None:
        if spec.kind is EPositionKind.Slot:
            raise AlignmentError(f"slot position '{spec.value}' needs a pair")
        index = length + spec.value if spec.kind is EPositionKind.FromRight else spec.value
        if not (0 <= index < length):
            raise AlignmentError(f"position {spec} is outside a {length}-token sequence")
        return [index]
    return [resolve_position(spec, tpair, side)]

#------------------------------------------------------------------------------
# Interventions.

def das_apply(f_b, f_s, a, require_unit=True):
    """ Swap the component of f_b along unit vector a for that of f_s.

    Works on (..., width) batches; the orthogonal complement of a is kept.
    require_unit=False skips the norm check for finite differences.
    """
    if f_b.shape != f_s.shape:
        raise ShapeError(f"das_apply shapes differ: {tuple(f_b.shape)} vs {tuple(f_s.shape)}")
    if a.dim() != 1 or a.shape[0] != f_b.shape[-1]:
        raise ShapeError(f"direction of shape {tuple(a.shape)} doesn't match width {f_b.shape[-1]}")
    if require_unit:
        norm = float(torch.linalg.vector_norm(a.detach().double()))
        if abs(norm - 1.0) > unit_tolerance:
            raise InterventionError(f"direction norm is {norm}, expected 1")
    coefficient = (f_s * a).sum(-1, keepdim=True) - (f_b * a).sum(-1, keepdim=True)
    return f_b + coefficient * a

@dataclass(frozen=True)
class Patch:
    """ Replace the activation with a cached one.
    """
    source: torch.Tensor

    def apply(self, current):
        return _align(self.source, current, "patch")

@dataclass(frozen=True)
class ProjectSwap:
    """ Swap the component along direction for the cached one's.
    """
    direction: torch.Tensor
    source: torch.Tensor
    require_unit: bool = True

    def apply(self, current):
        source = _align(self.source, current, "projection swap")
        return das_apply(current, source, self.direction.to(current.dtype), self.require_unit)

@dataclass(frozen=True)
class Scale:
    """ Multiply the activation by alpha.
    """
    alpha: float

    def apply(self, current):
        return current * self.alpha

@dataclass(frozen=True)
class Intervention:
    hookpoint: HookPoint
    action: object

def _align(source, current, what):
    source = source.to(current.dtype)
    if source.shape == current.shape:
        return source
    if source.numel() == current.numel() and source.shape[-1] == current.shape[-1]:
        return source.reshape(current.shape)
    raise ShapeError(f"{what} source of shape {tuple(source.shape)} doesn't fit site activation {tuple(current.shape)}")

def replace_positions(value, positions, new):
    """ Copy of value with rows at positions replaced by new (out of place).
    """
    index = torch.as_tensor(positions, dtype=torch.long, device=value.device)
    return value.index_put((index,), new.reshape(len(positions), value.shape[-1]))

def _edit_for(action, positions):
    def edit(value):
        index = torch.as_tensor(positions, dtype=torch.long, device=value.device)
        return replace_positions(value, positions, action.apply(value[index]))
    return edit

def _chain(first, second):
    return lambda value: second(first(value))

def build_edits(model, length, interventions, tpair=None, side="base"):
    """ Site -> edit function for forward().
    """
    seen = set()
    claimed = {}
    edits = {}
    for intervention in interventions:
        hookpoint = intervention.hookpoint.validate(model.config)
        if hookpoint in seen:
            raise InterventionError(f"two interventions at '{hookpoint}'")
        seen.add(hookpoint)

        positions = resolve_positions(hookpoint.position, tpair, side, length)
        taken = claimed.setdefault(hookpoint.site, set())
        if taken & set(positions):
            raise InterventionError(f"interventions overlap at '{hookpoint.site}' position(s) {sorted(taken & set(positions))}")
        taken.update(positions)

        edit = _edit_for(intervention.action, positions)
        site = hookpoint.site
        edits[site] = _chain(edits[site], edit) if site in edits else edit
    return edits

#------------------------------------------------------------------------------
# Runs.

def run_with_cache(model, tokens, hookpoints=(), tpair=None, side="base", interventions=()):
    """ One forward pass that applies interventions and captures hookpoints.

    Returns (logits, ActivationCache keyed by HookPoint). Each cached tensor
    is (width,) for a single position or (seq, width) for '*'.
    """
    tokens = list(tokens)
    hookpoints = [h.validate(model.config) for h in hookpoints]
    positions = {h: resolve_positions(h.position, tpair, side, len(tokens)) for h in hookpoints}
    edits = build_edits(model, len(tokens), interventions, tpair, side)

    with torch.no_grad():
        logits, sites = forward(model, tokens, taps={h.site for h in hookpoints}, edits=edits)

    cache = ActivationCache()
    for hookpoint in hookpoints:
        value = sites[hookpoint.site]
        if hookpoint.position.kind is EPositionKind.All:
            cache[hookpoint] = value
        else:
            cache[hookpoint] = value[positions[hookpoint][0]]
    return logits, cache

def capture(model, tokens, hookpoints, tpair=None, side="source"):
    """ Activations at hookpoints on a clean run.
    """
    return run_with_cache(model, tokens, hookpoints, tpair, side)[1]

def run_with(model, tokens, interventions, tpair=None, side="base"):
    """ Logits of a forward pass with interventions applied.
    """
    return run_with_cache(model, tokens, (), tpair, side, interventions)[0]

def final_logprobs(logits):
    """ Log-probabilities of the next token after the final position.
    """
    return log_softmax_lastdim(logits[-1])
