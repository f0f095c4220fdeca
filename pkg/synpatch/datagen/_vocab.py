# Core Python imports.
from dataclasses import dataclass, field
import json
import os
import re

# Local imports.
from ..errors import VocabularyError

#------------------------------------------------------------------------------
# Constants.

# Inflected forms stored in each vocabulary entry, "|" separated, in order.
# Categories not listed here hold plain single-form words.
category_forms = {
    "noun": ("sg", "pl"),
    "verb": ("past", "base", "s"),
    "iverb": ("base", "s", "past"),
    "phrasal": ("past", "ing"),
    "superlative": ("sup", "pos"),
    "capital": ("city", "country")
}

# Closed-class words that may appear in both vocabularies.
function_words = frozenset((
    "a", "about", "an", "as", "at", "be", "by", "for", "from", "in", "of", "on", "the", "to", "with"
))

_word = re.compile(r"[a-z]+")

# Shipped vocabularies, one per distribution tag.
_data_dir = os.path.dirname(os.path.realpath(__file__))
shipped_vocabularies = {
    "ID": os.path.join(_data_dir, "vocab_id.json"),
    "OOD": os.path.join(_data_dir, "vocab_ood.json")
}

@dataclass(frozen=True)
class VocabularySet:
    """ Category -> entries for one distribution ("ID" or "OOD").

    An entry is one lexeme with its forms joined by "|", e.g.
    "teacher|teachers" for a noun.
    """
    distribution: str
    categories: dict
    forms: dict = field(default_factory=lambda: dict(category_forms))

    def entries(self, category):
        if category not in self.categories:
            raise VocabularyError(f"{self.distribution} vocabulary has no category '{category}'")
        return self.categories[category]

    def surface_forms(self):
        """ Every form of every entry, across all categories.
        """
        out = set()
        for entries in self.categories.values():
            for entry in entries:
                out.update(entry.split("|"))
        return out

    def content_words(self):
        """ Lowercased words of every form, function words removed.
        """
        out = set()
        for form in self.surface_forms():
            out.update(content_words(form))
        return out

    def to_dict(self):
        return {
            "distribution": self.distribution,
            "forms": {k: list(v) for k, v in self.forms.items()},
            "categories": {k: list(v) for k, v in self.categories.items()}
        }

def content_words(text):
    """ Set of lowercased words in text that are not function words.
    """
    return {w for w in _word.findall(text.lower()) if w not in function_words}

def entry_form(entry, category, form=None, forms=None):
    """ Pick one form out of a "|" joined entry. No form means the first.
    """
    parts = entry.split("|")
    if form is None:
        return parts[0]
    names = (forms or category_forms).get(category, ())
    if form not in names:
        raise VocabularyError(f"category '{category}' has no form '{form}'")
    index = names.index(form)
    if index >= len(parts):
        raise VocabularyError(f"entry '{entry}' lacks the '{form}' form")
    return parts[index]

def load_vocabulary(path=None, distribution="ID"):
    """ Load a category -> word-list JSON file.

    With no path, the shipped vocabulary for distribution is used. The file
    holds either {"categories": {...}, "forms": {...}} or a bare category
    mapping.
    """
    if path is None:
        if distribution not in shipped_vocabularies:
            raise VocabularyError(f"unknown distribution '{distribution}'")
        path = shipped_vocabularies[distribution]

    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise VocabularyError(f"can't read vocabulary '{path}': {e}") from e

    if not isinstance(data, dict):
        raise VocabularyError(f"vocabulary '{path}' must be a JSON object")
    categories = data.get("categories", data)
    forms = dict(category_forms)
    forms.update({k: tuple(v) for k, v in data.get("forms", {}).items()})

    cleaned = {}
    for category, words in categories.items():
        if category in ("distribution", "forms"):
            continue
        if not isinstance(words, list) or not all(isinstance(w, str) and w for w in words):
            raise VocabularyError(f"category '{category}' in '{path}' must be a list of non-empty strings")
        # Keep first occurrence order, drop repeats.
        cleaned[category] = tuple(dict.fromkeys(words))

    return VocabularySet(data.get("distribution", distribution), cleaned, forms)

def check_disjoint(id_vocab, ood_vocab):
    """ Raise VocabularyError if any content word appears in both vocabularies.

    Multi-word forms are split, so "smiled at" clashes with "smiled".
    """
    shared = shared_words(id_vocab, ood_vocab)
    if shared:
        raise VocabularyError(f"ID and OOD vocabularies share {len(shared)} words: {shared[:10]}")

def shared_words(id_vocab, ood_vocab):
    return sorted(id_vocab.content_words() & ood_vocab.content_words())
