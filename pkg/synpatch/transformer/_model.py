""" GPT-NeoX style decoder with a hooked forward pass.

Weights are read from (and written to) safetensors archives using the NeoX
checkpoint names. The forward pass can record ("tap") and replace ("edit")
the activation at four kinds of site:

    resid.L    output residual stream of layer L
    attn.L     attention block output of layer L (after the output projection)
    mlp.L      MLP block output of layer L
    head.L.H   head H's value-weighted sum, before the output projection

Every site activation is a (seq, width) tensor.
"""

# Core Python imports.
from dataclasses import dataclass
from enum import Enum
import math

# 3rd party imports.
from loguru import logger
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file
import torch

# Local imports.
from ..errors import ArchiveError, HookPointError, MissingTensorError, RegionError, SequenceError, ShapeError
from ..tensor import causal_mask, gelu, get_dtype, layer_norm, log_softmax_lastdim, matmul, rotary_apply, softmax_lastdim

#------------------------------------------------------------------------------
# Constants.
_layer_prefix = "gpt_neox.layers.{}."
_embed_name = "gpt_neox.embed_in.weight"
_final_norm_prefix = "gpt_neox.final_layer_norm."
_unembed_name = "embed_out.weight"

# Per-layer tensors: our field name -> NeoX name suffix.
_layer_names = {
    "ln1_w": "input_layernorm.weight",
    "ln1_b": "input_layernorm.bias",
    "ln2_w": "post_attention_layernorm.weight",
    "ln2_b": "post_attention_layernorm.bias",
    "w_qkv": "attention.query_key_value.weight",
    "b_qkv": "attention.query_key_value.bias",
    "w_o": "attention.dense.weight",
    "b_o": "attention.dense.bias",
    "w_in": "mlp.dense_h_to_4h.weight",
    "b_in": "mlp.dense_h_to_4h.bias",
    "w_out": "mlp.dense_4h_to_h.weight",
    "b_out": "mlp.dense_4h_to_h.bias"
}

#------------------------------------------------------------------------------
# Sites.

class EHookKind(Enum):
    ResidOut = "resid"
    AttnOut = "attn"
    MlpOut = "mlp"
    HeadOut = "head"

@dataclass(frozen=True)
class Site:
    """ An activation site, without a token position.
    """
    kind: EHookKind
    layer: int
    head: int = None

    def __str__(self):
        if self.kind is EHookKind.HeadOut:
            return f"{self.kind.value}.{self.layer}.{self.head}"
        return f"{self.kind.value}.{self.layer}"

    def width(self, config):
        """ Size of the activation vector at one position.
        """
        return config.d_head if self.kind is EHookKind.HeadOut else config.d_model

    def validate(self, config):
        if (self.head is None) == (self.kind is EHookKind.HeadOut):
            raise HookPointError(f"'{self}': a head index is required for head sites and only for them")
        if not (0 <= self.layer < config.n_layers):
            raise HookPointError(f"'{self}': layer {self.layer} out of range (model has {config.n_layers})")
        if self.head is not None and not (0 <= self.head < config.n_heads):
            raise HookPointError(f"'{self}': head {self.head} out of range (model has {config.n_heads})")
        return self

class ActivationCache(dict):
    """ Site -> (seq, width) activation captured during a forward pass.
    """

    def __getitem__(self, key):
        if isinstance(key, str):
            for site in self.keys():
                if str(site) == key:
                    return super().__getitem__(site)
            raise KeyError(key)
        return super().__getitem__(key)

#------------------------------------------------------------------------------
# Weights.

@dataclass(frozen=True)
class LayerWeights:
    ln1_w: torch.Tensor
    ln1_b: torch.Tensor
    ln2_w: torch.Tensor
    ln2_b: torch.Tensor
    w_qkv: torch.Tensor
    b_qkv: torch.Tensor
    w_o: torch.Tensor
    b_o: torch.Tensor
    w_in: torch.Tensor
    b_in: torch.Tensor
    w_out: torch.Tensor
    b_out: torch.Tensor

@dataclass(frozen=True)
class Model:
    """ Immutable decoder weights plus their config.

    Weights never require gradients; treat the tensors as read only.
    """
    config: object
    embed: torch.Tensor
    layers: tuple
    ln_f_w: torch.Tensor
    ln_f_b: torch.Tensor
    unembed: torch.Tensor

    @property
    def dtype(self):
        return self.embed.dtype

    def state_dict(self):
        """ Tensors keyed by NeoX checkpoint name.
        """
        state = {_embed_name: self.embed}
        for index, layer in enumerate(self.layers):
            prefix = _layer_prefix.format(index)
            for field, suffix in _layer_names.items():
                state[prefix + suffix] = getattr(layer, field)
        state[_final_norm_prefix + "weight"] = self.ln_f_w
        state[_final_norm_prefix + "bias"] = self.ln_f_b
        if not self.config.tied_embeddings:
            state[_unembed_name] = self.unembed
        return state

def weight_shapes(config):
    """ Expected NeoX tensor name -> shape for a config.
    """
    d, d_mlp, vocab = config.d_model, config.d_mlp, config.vocab_size
    layer_shapes = {
        "ln1_w": (d,), "ln1_b": (d,),
        "ln2_w": (d,), "ln2_b": (d,),
        "w_qkv": (3 * d, d), "b_qkv": (3 * d,),
        "w_o": (d, d), "b_o": (d,),
        "w_in": (d_mlp, d), "b_in": (d_mlp,),
        "w_out": (d, d_mlp), "b_out": (d,)
    }

    shapes = {_embed_name: (vocab, d)}
    for index in range(config.n_layers):
        prefix = _layer_prefix.format(index)
        for field, suffix in _layer_names.items():
            shapes[prefix + suffix] = layer_shapes[field]
    shapes[_final_norm_prefix + "weight"] = (d,)
    shapes[_final_norm_prefix + "bias"] = (d,)
    if not config.tied_embeddings:
        shapes[_unembed_name] = (vocab, d)
    return shapes

def _build_model(config, tensors):
    layers = []
    for index in range(config.n_layers):
        prefix = _layer_prefix.format(index)
        layers.append(LayerWeights(**{
            field: tensors[prefix + suffix] for field, suffix in _layer_names.items()
        }))
    embed = tensors[_embed_name]
    return Model(
        config=config,
        embed=embed,
        layers=tuple(layers),
        ln_f_w=tensors[_final_norm_prefix + "weight"],
        ln_f_b=tensors[_final_norm_prefix + "bias"],
        unembed=embed if config.tied_embeddings else tensors[_unembed_name]
    )

def load_model(path, config, dtype="f32", name_map=None):
    """ Load a safetensors weight archive.

    name_map optionally maps NeoX names to the names used in the archive.
    Raises MissingTensorError, ShapeError or ArchiveError.
    """
    name_map = name_map or {}
    torch_dtype = get_dtype(dtype)
    tensors = {}
    try:
        with safe_open(path, framework="pt") as archive:
            available = set(archive.keys())
            for name, shape in weight_shapes(config).items():
                stored = name_map.get(name, name)
                if stored not in available:
                    raise MissingTensorError(stored)
                tensor = archive.get_tensor(stored)
                if not tensor.is_floating_point():
                    raise ArchiveError(f"tensor '{stored}' has non-float dtype {tensor.dtype}")
                if tuple(tensor.shape) != shape:
                    raise ShapeError(f"tensor '{stored}' has shape {tuple(tensor.shape)}, expected {shape}")
                tensors[name] = tensor.to(torch_dtype).contiguous().requires_grad_(False)
    except (SafetensorError, OSError) as e:
        raise ArchiveError(f"can't read weight archive '{path}': {e}") from e

    logger.info(f"Loaded {len(tensors)} tensors from {path}")
    return _build_model(config, tensors)

def save_model(model, path):
    """ Write the model's weights as a NeoX-named safetensors archive.
    """
    state = {name: tensor.detach().contiguous() for name, tensor in model.state_dict().items()}
    save_file(state, str(path))
    logger.debug(f"Saved {len(state)} tensors to {path}")

def random_model(config, seed=0, dtype="f32", scale=0.2):
    """ Seeded random weights, drawn in 64-bit then cast, so f32 and f64
    models built from one seed hold the same values.
    """
    generator = torch.Generator().manual_seed(seed)
    tensors = {}
    for name, shape in weight_shapes(config).items():
        noise = torch.randn(shape, generator=generator, dtype=torch.float64)
        if name.endswith("layernorm.weight") or name == _final_norm_prefix + "weight":
            values = 1.0 + 0.1 * noise
        elif len(shape) == 1:
            values = 0.1 * noise
        else:
            values = scale * noise
        tensors[name] = values.to(get_dtype(dtype))
    return _build_model(config, tensors)

#------------------------------------------------------------------------------
# Forward pass.

def check_tokens(model, tokens):
    """ Validate a token sequence and return it as a 1-D long tensor.
    """
    tokens = torch.as_tensor(tokens, dtype=torch.long).reshape(-1)
    if tokens.numel() == 0:
        raise SequenceError("empty token sequence")
    if tokens.numel() > model.config.max_positions:
        raise SequenceError(
            f"sequence of {tokens.numel()} tokens exceeds max_positions {model.config.max_positions}"
        )
    bad = (tokens < 0) | (tokens >= model.config.vocab_size)
    if bool(bad.any()):
        raise SequenceError(f"token id {int(tokens[bad][0])} out of range for vocab {model.config.vocab_size}")
    return tokens

def _attention(model, layer_index, layer, h, positions, site):
    cfg = model.config
    seq = h.shape[0]

    # NeoX packs q, k, v per head: [q_h, k_h, v_h] blocks of d_head rows.
    qkv = matmul(h, layer.w_qkv.T) + layer.b_qkv
    qkv = qkv.view(seq, cfg.n_heads, 3 * cfg.d_head).transpose(0, 1)
    q, k, v = qkv.split(cfg.d_head, dim=-1)
    q = rotary_apply(q, positions, cfg.rotary_fraction, cfg.rotary_base)
    k = rotary_apply(k, positions, cfg.rotary_fraction, cfg.rotary_base)

    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(cfg.d_head)
    scores = scores.masked_fill(~causal_mask(seq, device=h.device), float("-inf"))
    z = matmul(softmax_lastdim(scores), v)

    heads = [site(EHookKind.HeadOut, layer_index, z[index], index) for index in range(cfg.n_heads)]
    z = torch.stack(heads, dim=1).reshape(seq, cfg.d_model)
    return matmul(z, layer.w_o.T) + layer.b_o

def _mlp(layer, h):
    return matmul(gelu(matmul(h, layer.w_in.T) + layer.b_in), layer.w_out.T) + layer.b_out

def forward(model, tokens, taps=(), edits=None):
    """ Run the model on one token sequence.

    taps is an iterable of Sites to record. edits maps Sites to functions
    taking and returning the (seq, width) activation; the returned tensor is
    what downstream computation consumes. Taps record the activation after
    any edit.

    Returns (logits (seq, vocab), ActivationCache).
    """
    cfg = model.config
    tokens = check_tokens(model, tokens)
    taps = {s.validate(cfg) for s in taps}
    edits = edits or {}
    for s in edits:
        s.validate(cfg)
    cache = ActivationCache()

    def site(kind, layer_index, value, head=None):
        key = Site(kind, layer_index, head)
        if key in edits:
            edited = edits[key](value)
            if edited.shape != value.shape:
                raise ShapeError(f"edit at '{key}' returned {tuple(edited.shape)}, expected {tuple(value.shape)}")
            value = edited
        if key in taps:
            cache[key] = value
        return value

    positions = torch.arange(tokens.numel(), device=model.embed.device)
    x = model.embed[tokens]
    for index, layer in enumerate(model.layers):
        attn_out = _attention(model, index, layer, layer_norm(x, layer.ln1_w, layer.ln1_b, cfg.layer_norm_eps), positions, site)
        attn_out = site(EHookKind.AttnOut, index, attn_out)
        if cfg.parallel_residual:
            mlp_out = site(EHookKind.MlpOut, index, _mlp(layer, layer_norm(x, layer.ln2_w, layer.ln2_b, cfg.layer_norm_eps)))
            x = x + attn_out + mlp_out
        else:
            x = x + attn_out
            mlp_out = site(EHookKind.MlpOut, index, _mlp(layer, layer_norm(x, layer.ln2_w, layer.ln2_b, cfg.layer_norm_eps)))
            x = x + mlp_out
        x = site(EHookKind.ResidOut, index, x)

    x = layer_norm(x, model.ln_f_w, model.ln_f_b, cfg.layer_norm_eps)
    logits = matmul(x, model.unembed.T)
    return logits, cache

def unembed(model, resid):
    """ Logits for final-layer residual vectors (final LN then unembedding).
    """
    x = layer_norm(resid, model.ln_f_w, model.ln_f_b, model.config.layer_norm_eps)
    return matmul(x, model.unembed.T)

#------------------------------------------------------------------------------
# Scoring.

def _token_logprobs(model, tokens, edits):
    tokens = check_tokens(model, tokens)
    with torch.no_grad():
        logits, _ = forward(model, tokens, edits=edits)
    logprobs = log_softmax_lastdim(logits[:-1])
    return logprobs.gather(-1, tokens[1:].unsqueeze(-1)).squeeze(-1)

def sequence_logprob(model, tokens, edits=None):
    """ Sum of log p(t_i | t_<i) over positions 1..n-1.
    """
    tokens = check_tokens(model, tokens)
    if tokens.numel() < 2:
        raise SequenceError("sequence_logprob needs at least 2 tokens")
    return float(_token_logprobs(model, tokens, edits).sum())

def region_logprob(model, tokens, start, end, edits=None):
    """ Sum of log p(t_i | t_<i) for i in [start, end).

    Position 0 has no prediction, so start must be at least 1.
    """
    tokens = check_tokens(model, tokens)
    if not (1 <= start < end <= tokens.numel()):
        raise RegionError(f"region [{start}, {end}) is outside positions 1..{tokens.numel()}")
    return float(_token_logprobs(model, tokens, edits)[start - 1:end - 1].sum())
