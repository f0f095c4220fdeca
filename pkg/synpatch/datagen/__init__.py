from ._vocab import (
    VocabularySet,
    category_forms,
    check_disjoint,
    content_words,
    entry_form,
    function_words,
    load_vocabulary,
    shared_words,
    shipped_vocabularies
)
from ._templates import (
    ConstructionTemplate,
    EPhenomenon,
    Slot,
    alternating_slot,
    construction_ids,
    control_constructions,
    default_templates,
    fgd_constructions,
    get_template,
    id_templates,
    npi_constructions,
    npi_items,
    ood_templates,
    phenomenon_of,
    pronouns,
    render
)
from ._generate import (
    DatasetSplit,
    MinimalPair,
    ValidationReport,
    build_splits,
    continuation_text,
    default_sizes,
    generate,
    instantiate,
    read_pairs,
    read_split,
    split_names,
    split_path,
    symmetrize,
    validate,
    write_pairs,
    write_split
)
