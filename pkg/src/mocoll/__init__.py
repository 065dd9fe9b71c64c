"""Agent/VQA model collaboration for image captioning.

The package is organised around the pipeline stages: ``corpus`` (loading and
preprocessing), ``backends`` (chat endpoints and embeddings), ``retrieval``
(few-shot example choice), ``orchestrator`` (the question/answer/caption
loop), ``curation`` (synthetic QA generation, selection, dataset emission),
``metrics`` (BLEU, METEOR, ROUGE-L, CIDEr-D), ``simharness`` (a deterministic
synthetic world with scripted oracles) and ``cli``.
"""

__version__ = "0.1.0"
