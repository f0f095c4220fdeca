# Core Python imports.
from collections import Counter
from functools import lru_cache
import json
import os

# 3rd party imports.
from loguru import logger
import regex

# Local imports.
from ..errors import TokenizerError

# Distinct pre-tokenized pieces each tokenizer remembers.
bpe_cache_size = 1 << 16

# GPT-2 pre-tokenisation pattern (also used by GPT-NeoX).
_pretokenize = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)

@lru_cache()
def bytes_to_unicode():
    """ Map every byte to a printable unicode character.

    Printable latin-1 bytes map to themselves; the rest are shifted above 255
    so BPE symbols never contain whitespace or control characters.
    """
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))

class Tokenizer:
    """ Byte-level BPE tokenizer (GPT-2 convention).

    vocab maps token strings (in byte-mapped form) to ids; merges lists
    symbol pairs in rank order.
    """

    def __init__(self, vocab, merges):
        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {c: b for b, c in self.byte_encoder.items()}
        self.encoder = dict(vocab)
        self.decoder = {i: s for s, i in self.encoder.items()}
        self.merges = [tuple(m) for m in merges]
        self.bpe_ranks = {}
        for rank, (left, right) in enumerate(self.merges):
            if left not in self.encoder or right not in self.encoder:
                raise TokenizerError(f"merge {rank} '{left} {right}' references an unknown symbol")
            self.bpe_ranks.setdefault((left, right), rank)
        self._bpe = lru_cache(maxsize=bpe_cache_size)(self._merge_piece)

    def __len__(self):
        return len(self.encoder)

    #--------------------------------------------------------------------------
    # Loading and saving.

    @classmethod
    def from_files(cls, vocab_path, merges_path):
        """ Load vocab.json and merges.txt.
        """
        try:
            with open(vocab_path, "r", encoding="utf-8") as f:
                vocab = json.load(f)
            with open(merges_path, "r", encoding="utf-8") as f:
                lines = f.read().split("\n")
        except (OSError, json.JSONDecodeError) as e:
            raise TokenizerError(f"can't read tokenizer files: {e}") from e

        merges = []
        for line in lines:
            if line.startswith("#version") or not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise TokenizerError(f"bad merges line '{line}'")
            merges.append((parts[0], parts[1]))
        return cls(vocab, merges)

    @classmethod
    def from_tokenizer_json(cls, path):
        """ Load the single file tokenizer.json format.
        """
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
            vocab = dict(data["model"]["vocab"])
            raw_merges = data["model"]["merges"]
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise TokenizerError(f"can't read '{path}': {e}") from e

        for added in data.get("added_tokens", []):
            vocab.setdefault(added["content"], added["id"])
        merges = [tuple(m.split(" ")) if isinstance(m, str) else tuple(m) for m in raw_merges]
        return cls(vocab, merges)

    @classmethod
    def from_path(cls, path):
        """ Load from a tokenizer.json file or a directory holding either
        tokenizer.json or vocab.json + merges.txt.
        """
        if os.path.isdir(path):
            single = os.path.join(path, "tokenizer.json")
            if os.path.exists(single):
                return cls.from_tokenizer_json(single)
            return cls.from_files(os.path.join(path, "vocab.json"), os.path.join(path, "merges.txt"))
        return cls.from_tokenizer_json(path)

    def save(self, directory):
        """ Write vocab.json and merges.txt into directory.
        """
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "vocab.json"), "w", encoding="utf-8") as f:
            json.dump(self.encoder, f, ensure_ascii=False)
        with open(os.path.join(directory, "merges.txt"), "w", encoding="utf-8") as f:
            f.write("#version: 0.2\n")
            for left, right in self.merges:
                f.write(f"{left} {right}\n")

    @classmethod
    def train(cls, corpus, vocab_size):
        """ Learn a byte-level BPE vocabulary from a list of texts.

        Starts from the 256 byte symbols and repeatedly merges the most
        frequent adjacent pair (ties go to the lexically smallest pair) until
        the vocabulary reaches vocab_size or no pair occurs twice.
        """
        byte_encoder = bytes_to_unicode()
        vocab = {byte_encoder[b]: b for b in range(256)}

        words = Counter()
        for text in corpus:
            for piece in _pretokenize.findall(text):
                words[tuple(byte_encoder[b] for b in piece.encode("utf-8"))] += 1

        merges = []
        while len(vocab) < vocab_size:
            pair_counts = Counter()
            for word, count in words.items():
                for pair in zip(word, word[1:]):
                    pair_counts[pair] += count
            if not pair_counts:
                break
            best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
            if pair_counts[best] < 2:
                break

            merged = best[0] + best[1]
            merges.append(best)
            vocab.setdefault(merged, len(vocab))

            # Apply the merge to every word.
            new_words = Counter()
            for word, count in words.items():
                new_words[_merge_symbols(word, best)] += count
            words = new_words

        logger.debug(f"Trained BPE tokenizer with {len(vocab)} tokens and {len(merges)} merges")
        return cls(vocab, merges)

    #--------------------------------------------------------------------------
    # Encoding.

    def _merge_piece(self, piece):
        """ Merge a byte-mapped piece lowest-rank-first. Returns the symbols.
        """
        word = tuple(piece)
        while len(word) > 1:
            bigram = min(set(zip(word, word[1:])), key=lambda p: self.bpe_ranks.get(p, float("inf")))
            if bigram not in self.bpe_ranks:
                break
            word = _merge_symbols(word, bigram)

        return word

    def _symbol_ids(self, symbol):
        if symbol in self.encoder:
            return [self.encoder[symbol]]

        # Byte-level fallback.
        ids = []
        for char in symbol:
            if char not in self.encoder:
                raise TokenizerError(f"byte symbol '{char}' is not in the vocabulary")
            ids.append(self.encoder[char])
        return ids

    def encode_with_offsets(self, text):
        """ Token ids with the UTF-8 byte span each token covers.

        Returns a list of (id, byte_start, byte_end).
        """
        out = []
        offset = 0
        for piece in _pretokenize.findall(text):
            mapped = "".join(self.byte_encoder[b] for b in piece.encode("utf-8"))
            for symbol in self._bpe(mapped):
                ids = self._symbol_ids(symbol)
                if len(ids) == 1:
                    out.append((ids[0], offset, offset + len(symbol)))
                else:
                    for i, token_id in enumerate(ids):
                        out.append((token_id, offset + i, offset + i + 1))
                offset += len(symbol)
        return out

    def encode(self, text):
        """ Token ids for text.
        """
        return [token_id for token_id, _, _ in self.encode_with_offsets(text)]

    def decode(self, ids):
        """ Text for a sequence of token ids.
        """
        try:
            text = "".join(self.decoder[i] for i in ids)
        except KeyError as e:
            raise TokenizerError(f"token id {e.args[0]} is not in the vocabulary") from e
        return bytearray(self.byte_decoder[c] for c in text).decode("utf-8", errors="replace")

def _merge_symbols(word, pair):
    """ Replace every occurrence of pair in word, left to right.
    """
    first, second = pair
    out = []
    i = 0
    while i < len(word):
        if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
            out.append(first + second)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)
