"""Federated named-entity recognition with a shared/private model split.

Submodules:

autodiff     reverse-mode automatic differentiation over numpy arrays
crf          linear-chain CRF: log-partition, sequence score, Viterbi
model        CNN-BiLSTM-CRF tagger and the shared/private parameter split
optim        plain gradient and Adam steps over flat vectors
federated    platforms, coordinator, aggregation, centralized baseline
transport    binary wire format and in-process / TCP channels
data         CoNLL corpora, BIO checks, splits, vocabulary, masking
evaluate     strict and relaxed span precision / recall / F1
synthetic    seeded multi-platform benchmark corpora
experiments  single-platform vs federated study designs
cli          experiment runner (``python -m fedner``)
"""

__version__ = "0.1.0"
