"""Semantic similarity engine matching regulatory rules to policies.

Subpackages map onto the pipeline stages: ``corpus`` (ingestion and
vocabulary), ``count_embed`` (co-occurrence + SVD word vectors),
``neural_embed`` (skip-gram with negative sampling), ``attention`` (the toy
transformer encoder), ``search`` (cosine matching), ``adapt`` (MLM, MNR and
GPL training loops), ``evaluation`` (ensemble pseudo-labeling and scores),
and ``cli`` (the command-line surface).
"""

__version__ = "0.1.0"
