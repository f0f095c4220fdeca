from ._config import ModelConfig
from ._tokenizer import Tokenizer, bytes_to_unicode
from ._model import (
    ActivationCache,
    EHookKind,
    LayerWeights,
    Model,
    Site,
    check_tokens,
    forward,
    load_model,
    random_model,
    region_logprob,
    save_model,
    sequence_logprob,
    unembed,
    weight_shapes
)

def tokenize(tokenizer, text):
    """ Token ids for text.
    """
    return tokenizer.encode(text)
