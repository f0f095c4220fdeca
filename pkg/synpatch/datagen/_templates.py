""" Construction templates for the minimal-pair dataset.

A template is an ordered list of slots. Exactly one slot alternates between
the base and the source sentence (the filler for filler-gap and control
constructions, the licensor for NPI constructions); every other slot
renders identically on both sides.

Slot text may hold placeholders:

    {noun}          first form of a noun entry
    {noun:pl}       a named form of the entry
    {noun:#}        the form matching the sentence's number (sg or pl)
    {has|have}      literal alternatives chosen by number (sg, pl)
    {noun@2}        tags bind placeholders to one entry; different tags of
                    one category draw different entries
    {noun@2:pl}     tag and form together, in either order

The OOD templates are structurally parallel rewrites of the ID ones: the
same slots and gap distances with different fixed words.
"""

# Core Python imports.
from dataclasses import dataclass
from enum import Enum
import re

# Local imports.
from ..errors import DatasetError
from ._vocab import entry_form

#------------------------------------------------------------------------------
# Constants.
class EPhenomenon(Enum):
    FGD = "FGD"
    NPI = "NPI"
    Control = "control"

fgd_constructions = ("EWhK", "EWhW", "MWh", "RelCl", "Cleft", "PCleft", "Topic")
npi_constructions = ("Cond", "DNeg", "SOnly", "Qnt", "EmbQ", "SmpQ", "Sup", "Only")
control_constructions = ("Ctrl",)
construction_ids = fgd_constructions + npi_constructions + control_constructions

npi_items = ("any", "ever")
pronouns = ("her", "him", "them", "me", "us", "you")

_placeholder = re.compile(r"\{([^{}]+)\}")
_binding = re.compile(r"^([a-z]+)(?::([a-z#]+))?(?:@(\w+))?(?::([a-z#]+))?$")

def phenomenon_of(construction):
    """ EPhenomenon for a construction id.
    """
    if construction in fgd_constructions:
        return EPhenomenon.FGD
    if construction in npi_constructions:
        return EPhenomenon.NPI
    if construction in control_constructions:
        return EPhenomenon.Control
    raise DatasetError(f"unknown construction '{construction}'")

def alternating_slot(construction):
    """ Name of the slot that differs between base and source.
    """
    return "licensor" if phenomenon_of(construction) is EPhenomenon.NPI else "filler"

#------------------------------------------------------------------------------
# Placeholders.

def _parse(inner):
    """ Parse a placeholder body into (key, category, form) or a literal
    number alternative ("number", sg_text, pl_text).
    """
    if "|" in inner:
        parts = inner.split("|")
        if len(parts) != 2:
            raise DatasetError(f"number alternative '{{{inner}}}' needs exactly two forms")
        return ("number", parts[0], parts[1])

    match = _binding.match(inner)
    if match is None:
        raise DatasetError(f"bad placeholder '{{{inner}}}'")
    # The form may come before or after the tag, not both.
    category, form, tag, late_form = match.groups()
    if form and late_form:
        raise DatasetError(f"placeholder '{{{inner}}}' names two forms")
    form = form or late_form
    key = f"{category}@{tag}" if tag else category
    return (key, category, form)

def bindings(pattern):
    """ (key, category) for every vocabulary placeholder in pattern.
    """
    out = []
    for inner in _placeholder.findall(pattern or ""):
        key, category, _ = _parse(inner)
        if key != "number":
            out.append((key, category))
    return out

def render(pattern, fills, number="sg", forms=None):
    """ Substitute placeholders in pattern.

    fills maps binding keys ("noun", "noun@2", ...) to vocabulary entries.
    """
    def substitute(match):
        key, first, second = _parse(match.group(1))
        if key == "number":
            return first if number == "sg" else second
        if key not in fills:
            raise DatasetError(f"no fill for placeholder '{{{match.group(1)}}}'")
        form = number if second == "#" else second
        return entry_form(fills[key], first, form, forms)

    return _placeholder.sub(substitute, pattern or "")

#------------------------------------------------------------------------------
# Templates.

@dataclass(frozen=True)
class Slot:
    """ One template slot. source is set only on the alternating slot.
    """
    name: str
    text: str = ""
    source: str = None

    @property
    def alternating(self):
        return self.source is not None

    def pattern(self, side):
        return self.source if (side == "source" and self.alternating) else self.text

@dataclass(frozen=True)
class ConstructionTemplate:
    construction: str
    distribution: str
    slots: tuple
    y_base: tuple
    y_source: tuple
    numbered: bool = False

    def __post_init__(self):
        alternating = [s.name for s in self.slots if s.alternating]
        if len(alternating) != 1:
            raise DatasetError(f"{self.construction}: expected one alternating slot, found {alternating}")
        if alternating[0] != alternating_slot(self.construction):
            raise DatasetError(f"{self.construction}: alternating slot must be '{alternating_slot(self.construction)}'")
        if self.phenomenon is EPhenomenon.NPI and not set(self.y_base) <= set(npi_items):
            raise DatasetError(f"{self.construction}: NPI outputs must be drawn from {npi_items}")
        if not self.y_base or not self.y_source:
            raise DatasetError(f"{self.construction}: empty output set")

    @property
    def phenomenon(self):
        return phenomenon_of(self.construction)

    @property
    def alternating(self):
        return alternating_slot(self.construction)

    def bindings(self):
        """ Sorted {key: category} over every slot and output pattern.
        """
        out = {}
        patterns = [s.text for s in self.slots] + [s.source for s in self.slots] + list(self.y_base) + list(self.y_source)
        for pattern in patterns:
            for key, category in bindings(pattern):
                out[key] = category
        return dict(sorted(out.items()))

def _fgd(construction, distribution, prefix, filler, nc, noun, verb, y_base, article="the"):
    return ConstructionTemplate(
        construction=construction,
        distribution=distribution,
        slots=(
            Slot("prefix", prefix),
            Slot("filler", filler[0], filler[1]),
            Slot("nc", nc),
            Slot("article", article),
            Slot("noun", noun),
            Slot("verb", verb)
        ),
        y_base=(y_base,),
        y_source=pronouns
    )

def _npi(construction, distribution, prefix, licensor, nc, last, numbered=False):
    return ConstructionTemplate(
        construction=construction,
        distribution=distribution,
        slots=(
            Slot("prefix", prefix),
            Slot("licensor", licensor[0], licensor[1]),
            Slot("nc", nc),
            Slot("last", last)
        ),
        y_base=npi_items,
        y_source=("some",),
        numbered=numbered
    )

def _ctrl(distribution):
    return ConstructionTemplate(
        construction="Ctrl",
        distribution=distribution,
        slots=(
            Slot("prefix", "{opener}"),
            Slot("filler", "{capital:city@b}", "{capital:city@s}"),
            Slot("nc", "is"),
            Slot("article", "the"),
            Slot("noun", "capital"),
            Slot("verb", "of")
        ),
        y_base=("{capital:country@b}",),
        y_source=("{capital:country@s}",)
    )

id_templates = (
    _fgd("EWhK", "ID", "The {noun@1} knows", ("who", "that"), "", "{noun@2}", "{verb:past}", "."),
    _fgd("EWhW", "ID", "The {noun@1} wondered", ("who", "if"), "", "{noun@2}", "{verb:past}", "."),
    _fgd("MWh", "ID", "Then,", ("who", ""), "did", "{noun@2}", "{verb:base}", "?"),
    _fgd("RelCl", "ID", "The {noun@1}", ("who", "and"), "", "{noun@2}", "{phrasal:past}", "."),
    _fgd("Cleft", "ID", "It was", ("the {noun@1}", "{clausal}"), "that", "{noun@2}", "{verb:past}", "."),
    _fgd("PCleft", "ID", "", ("Who", "That"), "", "{noun@2}", "is {phrasal:ing}", "is"),
    _fgd("Topic", "ID", "Actually,", ("the {noun@1}", ""), "", "{noun@2}", "{verb:past}", "."),
    _npi("Cond", "ID", "The {noun@1} will {iverb:base}", ("if", "while"), "the {noun@2}", "{verb:s}"),
    _npi("DNeg", "ID", "", ("No", "The"), "{noun} have", "{verb:past}"),
    _npi("SOnly", "ID", "", ("Only", "Even"), "the {adj} {noun:#}", "{has|have}", numbered=True),
    _npi("Qnt", "ID", "These are", ("all", "some"), "of the {noun:pl} who", "{verb:past}"),
    _npi("EmbQ", "ID", "The {noun@1:pl}", ("wonder whether", "know that"), "the {noun@2:#} {has|have}", "{verb:past}", numbered=True),
    _npi("SmpQ", "ID", "", ("Has", ""), "the {noun}", "{verb:past}"),
    _npi("Sup", "ID", "This is the", ("{superlative:sup}", "{superlative:pos}"), "{noun} that had", "{verb:past}"),
    _npi("Only", "ID", "They are the", ("only", "{adj}"), "{noun:pl} that", "{verb:s}"),
    _ctrl("ID")
)

ood_templates = (
    _fgd("EWhK", "OOD", "The {noun@1} forgot", ("who", "that"), "", "{noun@2}", "{verb:past}", "."),
    _fgd("EWhW", "OOD", "The {noun@1} asked", ("who", "if"), "", "{noun@2}", "{verb:past}", "."),
    _fgd("MWh", "OOD", "So,", ("who", ""), "did", "{noun@2}", "{verb:base}", "?"),
    _fgd("RelCl", "OOD", "This is the {noun@1}", ("who", "and"), "", "{noun@2}", "{phrasal:past}", "."),
    _fgd("Cleft", "OOD", "It is", ("the {noun@1}", "{clausal}"), "that", "{noun@2}", "{verb:past}", "."),
    _fgd("PCleft", "OOD", "", ("Who", "That"), "", "{noun@2}", "was {phrasal:ing}", "was"),
    _fgd("Topic", "OOD", "Well,", ("the {noun@1}", ""), "", "{noun@2}", "{verb:past}", "."),
    _npi("Cond", "OOD", "The {noun@1} would {iverb:base}", ("if", "because"), "the {noun@2}", "{verb:s}"),
    _npi("DNeg", "OOD", "", ("No", "This"), "{noun} had", "{verb:past}"),
    _npi("SOnly", "OOD", "", ("Only", "Also"), "the {adj} {noun:#}", "{has|have}", numbered=True),
    _npi("Qnt", "OOD", "Those were", ("all", "some"), "of the {noun:pl} who", "{verb:past}"),
    _npi("EmbQ", "OOD", "The {noun@1:pl}", ("asked whether", "said that"), "the {noun@2:#} {has|have}", "{verb:past}", numbered=True),
    _npi("SmpQ", "OOD", "", ("Had", ""), "the {noun}", "{verb:past}"),
    _npi("Sup", "OOD", "That was the", ("{superlative:sup}", "{superlative:pos}"), "{noun} that had", "{verb:past}"),
    _npi("Only", "OOD", "We are the", ("only", "{adj}"), "{noun:pl} that", "{verb:s}"),
    _ctrl("OOD")
)

default_templates = id_templates + ood_templates

def get_template(construction, distribution="ID", templates=default_templates):
    for template in templates:
        if template.construction == construction and template.distribution == distribution:
            return template
    raise DatasetError(f"no {distribution} template for construction '{construction}'")
