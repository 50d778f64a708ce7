"""English-Hindi multimodal translation toolkit.

Modules, in pipeline order: `corpus` (TSV ingestion, normalization,
region boxes, split statistics), `subword` (joint BPE and vocabularies),
`features` (binary region-feature files), `autodiff` (tensors with
reverse-mode gradients), `model` (bidirectional encoder, doubly
attentive decoder), `trainer` (Adam, checkpoints), `inference` (beam
search, two-model selection), `metrics` (BLEU, RIBES), and `cli`.
"""

__version__ = "0.1.0"
