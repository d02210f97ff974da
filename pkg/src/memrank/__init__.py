"""memrank: learned reranking toolkit for conversational memory retrieval.

Pipeline: ingest records -> embedding cache -> dense top-N pools -> cached
lexical features -> windowed mixer scorer (teacher-distilled) -> gated
candidate-set editor -> metrics / paired bootstrap / degeneracy audit /
latency harness. The core is encoder-agnostic: embeddings arrive as
precomputed caches.
"""

__version__ = "0.1.0"
