# Core Python imports.
import json
import os
import sys
import tempfile

# Modify path so we can include the version of synpatch in this directory
# instead of relying on the user having it installed.
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

# 3rd party imports.
import numpy as np
from safetensors.torch import save_file
import torch

# Import our package.
from synpatch.errors import ArchiveError, ConfigError, HookPointError, MissingTensorError, RegionError, SequenceError, ShapeError, TokenizerError
from synpatch.transformer import (
    EHookKind,
    ModelConfig,
    Site,
    Tokenizer,
    forward,
    load_model,
    random_model,
    region_logprob,
    save_model,
    sequence_logprob,
    tokenize
)
from tiny_model import naive_forward, tiny_config, tiny_model, tiny_split, tiny_tokenizer

def _raises(error, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except error:
        return True
    return False

#------------------------------------------------------------------------------
# Config.

def test_config():
    config = ModelConfig(n_layers=2, n_heads=4, d_model=32, vocab_size=50)
    assert config.d_head == 8
    assert config.d_mlp == 128
    assert _raises(ConfigError, ModelConfig, n_layers=0, n_heads=2, d_model=16, vocab_size=50)
    assert _raises(ConfigError, ModelConfig, n_layers=1, n_heads=3, d_model=16, vocab_size=50, d_head=4)
    assert _raises(ConfigError, ModelConfig, n_layers=1, n_heads=2, d_model=16, vocab_size=1)

    neox = ModelConfig.from_dict({
        "num_hidden_layers": 16,
        "num_attention_heads": 8,
        "hidden_size": 2048,
        "intermediate_size": 8192,
        "vocab_size": 50304,
        "rotary_pct": 0.25,
        "use_parallel_residual": True,
        "architectures": ["GPTNeoXForCausalLM"]
    })
    assert neox.n_layers == 16 and neox.d_head == 256 and neox.d_mlp == 8192
    assert ModelConfig.from_dict(neox.to_dict()) == neox

#------------------------------------------------------------------------------
# Tokenizer.

def test_tokenizer_round_trip():
    tokenizer = tiny_tokenizer()
    assert tokenize(tokenizer, "") == []
    for text in ["The doctor knows who the nurse saw him.", "naïve café — 日本語 ✓", "  spaces\tand\nlines  "]:
        assert tokenizer.decode(tokenizer.encode(text)) == text

    # Seeded random strings over ASCII, Latin, CJK and emoji code points.
    rng = np.random.default_rng(0)
    ranges = [(0x20, 0x7f), (0x09, 0x0b), (0xa0, 0x250), (0x4e00, 0x4f00), (0x1f300, 0x1f650)]
    for _ in range(200):
        chars = []
        for _ in range(int(rng.integers(1, 30))):
            low, high = ranges[int(rng.integers(len(ranges)))]
            chars.append(chr(int(rng.integers(low, high))))
        text = "".join(chars)
        assert tokenizer.decode(tokenizer.encode(text)) == text, repr(text)

    # A byte no merge touches is one base token.
    assert len(tokenizer.encode("~")) == 1

    # Outputs used by the tiny dataset are single tokens.
    for word in (" any", " some", " him", "."):
        assert len(tokenizer.encode(word)) == 1

def test_tokenizer_cache_is_bounded():
    from synpatch.transformer import _tokenizer
    tokenizer = tiny_tokenizer()
    saved = _tokenizer.bpe_cache_size
    _tokenizer.bpe_cache_size = 8
    try:
        small = Tokenizer(tokenizer.encoder, tokenizer.merges)
    finally:
        _tokenizer.bpe_cache_size = saved

    text = " ".join(f"w{i}" for i in range(100))
    assert small.encode(text) == tokenizer.encode(text)
    assert small._bpe.cache_info().currsize == 8

def test_tokenizer_offsets():
    tokenizer = tiny_tokenizer()
    text = "The café knows"
    raw = text.encode("utf-8")
    pieces = tokenizer.encode_with_offsets(text)
    assert pieces[0][1] == 0 and pieces[-1][2] == len(raw)
    for (_, start, end), (_, next_start, _) in zip(pieces, pieces[1:] + [(None, len(raw), None)]):
        assert start < end == next_start
    assert tokenizer.decode([token for token, _, _ in pieces]) == text

def test_tokenizer_files():
    tokenizer = tiny_tokenizer()
    with tempfile.TemporaryDirectory() as directory:
        tokenizer.save(directory)
        loaded = Tokenizer.from_path(directory)
        sentences = [p.base for p in tiny_split().train]
        for sentence in sentences:
            assert loaded.encode(sentence) == tokenizer.encode(sentence)

        # Single file format.
        path = os.path.join(directory, "tokenizer.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"model": {"vocab": tokenizer.encoder, "merges": [" ".join(m) for m in tokenizer.merges]}}, f)
        single = Tokenizer.from_tokenizer_json(path)
        assert single.encode(sentences[0]) == tokenizer.encode(sentences[0])

    assert _raises(TokenizerError, Tokenizer, {"a": 0}, [("a", "b")])
    assert _raises(TokenizerError, tokenizer.decode, [len(tokenizer) + 10])

def test_tokenizer_reference_bpe():
    """ Same ids as a straightforward rank-ordered merge loop.
    """
    tokenizer = tiny_tokenizer()

    def reference(text):
        from synpatch.transformer._tokenizer import _pretokenize
        ids = []
        for piece in _pretokenize.findall(text):
            word = [tokenizer.byte_encoder[b] for b in piece.encode("utf-8")]
            for left, right in tokenizer.merges:
                i = 0
                while i < len(word) - 1:
                    if word[i] == left and word[i + 1] == right:
                        word[i:i + 2] = [left + right]
                    else:
                        i += 1
            ids.extend(tokenizer.encoder[s] for s in word)
        return ids

    sentences = [p.base for part in tiny_split().parts().values() for p in part][:50]
    for sentence in sentences:
        assert tokenizer.encode(sentence) == reference(sentence)

#------------------------------------------------------------------------------
# Forward pass.

def test_forward_matches_naive_loop():
    model = tiny_model()
    tokens = tiny_tokenizer().encode("The doctor knows who the nurse saw")
    logits, _ = forward(model, tokens)
    assert logits.shape == (len(tokens), model.config.vocab_size)
    assert float((logits - naive_forward(model, tokens)).abs().max()) < 1e-5

def test_residual_forms_match_naive_loop():
    tokens = tiny_tokenizer().encode("The doctor knows who the nurse saw")
    kinds = (EHookKind.ResidOut, EHookKind.AttnOut, EHookKind.MlpOut)
    results = []
    for parallel in (True, False):
        model = tiny_model(parallel_residual=parallel)
        taps = {Site(kind, layer) for kind in kinds for layer in range(model.config.n_layers)}
        logits, cache = forward(model, tokens, taps=taps)
        record = {}
        expected = naive_forward(model, tokens, record)
        assert float((logits - expected).abs().max()) < 1e-5
        assert set(record) == {str(site) for site in taps}
        for name, value in record.items():
            assert float((cache[name] - value).abs().max()) < 1e-5, (parallel, name)
        results.append(logits)

    # Same weights, different wiring.
    assert not torch.allclose(results[0], results[1])

def test_causality():
    model = tiny_model()
    tokens = tiny_tokenizer().encode("The doctor knows who the nurse saw")
    changed = tokens[:4] + [(t + 7) % model.config.vocab_size for t in tokens[4:]]
    a, _ = forward(model, tokens)
    b, _ = forward(model, changed)
    assert torch.equal(a[:4], b[:4])

def test_taps():
    model = tiny_model()
    tokens = tiny_tokenizer().encode("No man have seen")
    plain, _ = forward(model, tokens)
    taps = {Site(EHookKind.HeadOut, 1, 0), Site(EHookKind.ResidOut, 0), Site(EHookKind.AttnOut, 1)}
    tapped, cache = forward(model, tokens, taps=taps)
    assert torch.equal(plain, tapped)
    assert set(cache) == taps
    assert cache["head.1.0"].shape == (len(tokens), model.config.d_head)
    assert cache[Site(EHookKind.ResidOut, 0)].shape == (len(tokens), model.config.d_model)
    assert _raises(HookPointError, forward, model, tokens, taps={Site(EHookKind.HeadOut, 1, 5)})

def test_head_decomposition():
    model = tiny_model()
    cfg = model.config
    tokens = tiny_tokenizer().encode("The doctor knows who the nurse saw")
    heads = {Site(EHookKind.HeadOut, 1, h) for h in range(cfg.n_heads)}
    _, cache = forward(model, tokens, taps=heads | {Site(EHookKind.AttnOut, 1)})
    layer = model.layers[1]
    total = layer.b_o.clone()
    for h in range(cfg.n_heads):
        w = layer.w_o[:, h * cfg.d_head:(h + 1) * cfg.d_head]
        total = total + cache[Site(EHookKind.HeadOut, 1, h)] @ w.T
    assert float((total - cache[Site(EHookKind.AttnOut, 1)]).abs().max()) < 1e-5

def test_final_resid_unembeds_to_logits():
    from synpatch.transformer import unembed
    model = tiny_model()
    tokens = tiny_tokenizer().encode("Has the man seen")
    logits, cache = forward(model, tokens, taps={Site(EHookKind.ResidOut, 1)})
    assert torch.allclose(unembed(model, cache["resid.1"]), logits)

def test_sequence_errors():
    model = tiny_model()
    assert _raises(SequenceError, forward, model, [])
    assert _raises(SequenceError, forward, model, [0] * 65)
    assert _raises(SequenceError, forward, model, [model.config.vocab_size])
    assert _raises(SequenceError, sequence_logprob, model, [1])

def test_sequence_logprob():
    model = tiny_model()
    tokens = tiny_tokenizer().encode("No man have seen any")

    # Two tokens: one term.
    logits, _ = forward(model, tokens[:1])
    expected = float(torch.log_softmax(logits[-1], -1)[tokens[1]])
    assert abs(sequence_logprob(model, tokens[:2]) - expected) < 1e-9

    # Stepwise recomputation.
    total = 0.0
    for t in range(1, len(tokens)):
        logits, _ = forward(model, tokens[:t])
        total += float(torch.log_softmax(logits[-1], -1)[tokens[t]])
    value = sequence_logprob(model, tokens)
    assert value < 0
    assert abs(value - total) < 1e-6

    assert abs(region_logprob(model, tokens, 1, len(tokens)) - value) < 1e-9
    assert _raises(RegionError, region_logprob, model, tokens, 0, 2)
    assert _raises(RegionError, region_logprob, model, tokens, 2, len(tokens) + 1)

#------------------------------------------------------------------------------
# Weight archives.

def test_archive_round_trip():
    model = tiny_model(dtype="f32")
    tokens = tiny_tokenizer().encode("The doctor knows")
    with tempfile.TemporaryDirectory() as directory:
        path = os.path.join(directory, "model.safetensors")
        save_model(model, path)
        loaded = load_model(path, model.config)
        assert torch.equal(forward(model, tokens)[0], forward(loaded, tokens)[0])

        # f32 and f64 views of one seed hold the same values.
        wide = load_model(path, model.config, dtype="f64")
        assert wide.dtype == torch.float64

def test_archive_errors():
    model = tiny_model(dtype="f32")
    state = {name: tensor.contiguous() for name, tensor in model.state_dict().items()}
    with tempfile.TemporaryDirectory() as directory:
        missing = dict(state)
        del missing["gpt_neox.layers.1.mlp.dense_4h_to_h.weight"]
        path = os.path.join(directory, "missing.safetensors")
        save_file(missing, path)
        try:
            load_model(path, model.config)
            assert False
        except MissingTensorError as e:
            assert "gpt_neox.layers.1.mlp.dense_4h_to_h.weight" in str(e)

        transposed = dict(state)
        name = "gpt_neox.layers.0.attention.dense.weight"
        transposed[name] = torch.zeros(model.config.d_model, model.config.d_model + 1)
        path = os.path.join(directory, "transposed.safetensors")
        save_file(transposed, path)
        assert _raises(ShapeError, load_model, path, model.config)

        path = os.path.join(directory, "corrupt.safetensors")
        with open(path, "wb") as f:
            f.write(b"\xff" * 16)
        assert _raises(ArchiveError, load_model, path, model.config)

def test_random_model_dtypes():
    config = tiny_config()
    narrow = random_model(config, seed=3, dtype="f32")
    wide = random_model(config, seed=3, dtype="f64")
    assert torch.equal(narrow.embed, wide.embed.float())

if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"{name} passed")
