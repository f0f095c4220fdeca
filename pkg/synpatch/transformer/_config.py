# Core Python imports.
from dataclasses import asdict, dataclass, fields
import json

# Local imports.
from ..errors import ConfigError

# Hugging Face GPT-NeoX config.json keys and the fields they map to.
_neox_keys = {
    "num_hidden_layers": "n_layers",
    "num_attention_heads": "n_heads",
    "hidden_size": "d_model",
    "intermediate_size": "d_mlp",
    "vocab_size": "vocab_size",
    "max_position_embeddings": "max_positions",
    "rotary_pct": "rotary_fraction",
    "rotary_emb_base": "rotary_base",
    "use_parallel_residual": "parallel_residual",
    "layer_norm_eps": "layer_norm_eps",
    "tie_word_embeddings": "tied_embeddings"
}

@dataclass(frozen=True)
class ModelConfig:
    """ Shape and layout of a GPT-NeoX style decoder.

    d_head defaults to d_model / n_heads and d_mlp to 4 * d_model.
    """
    n_layers: int
    n_heads: int
    d_model: int
    vocab_size: int
    max_positions: int = 2048
    d_head: int = 0
    d_mlp: int = 0
    rotary_fraction: float = 0.25
    rotary_base: int = 10000
    parallel_residual: bool = True
    layer_norm_eps: float = 1e-5
    tied_embeddings: bool = False

    def __post_init__(self):
        if self.n_heads < 1:
            raise ConfigError(f"n_heads must be at least 1, got {self.n_heads}")
        if self.d_head == 0:
            object.__setattr__(self, "d_head", self.d_model // self.n_heads)
        if self.d_mlp == 0:
            object.__setattr__(self, "d_mlp", 4 * self.d_model)

        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be at least 1, got {self.n_layers}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be at least 2, got {self.vocab_size}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads x d_head ({self.n_heads} x {self.d_head})"
            )
        if not (0 <= self.rotary_fraction <= 1):
            raise ConfigError(f"rotary_fraction must be in [0, 1], got {self.rotary_fraction}")
        if self.max_positions < 1:
            raise ConfigError(f"max_positions must be at least 1, got {self.max_positions}")

    @classmethod
    def from_dict(cls, data):
        """ Build from either our own field names or GPT-NeoX config.json names.
        """
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key in known:
                kwargs[key] = value
            elif key in _neox_keys:
                kwargs[_neox_keys[key]] = value
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"incomplete model config: {e}") from e

    @classmethod
    def from_json(cls, path):
        """ Load from a JSON file.
        """
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"can't read model config '{path}': {e}") from e
        return cls.from_dict(data)

    def to_dict(self):
        return asdict(self)
