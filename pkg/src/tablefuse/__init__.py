"""LLM-steered AutoML for multimodal tables.

Stages: modality inference, feature filtering and imputation, model
selection from a card zoo, late-fusion assembly, and hyperparameter search.
Every LLM call goes through :class:`tablefuse.llm.Gateway`, which can run
fully offline from recorded fixtures.
"""

from .table import MISSING, Modality, StructuredTable, TableError, load_table, save_table

__version__ = "0.1.0"

__all__ = ["MISSING", "Modality", "StructuredTable", "TableError", "load_table", "save_table", "__version__"]
