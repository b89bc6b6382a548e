"""seqmargin: a desk-scale laboratory for sequence-model margin diagnostics.

The package trains two model families on small corpora -- a locally
normalized encoder-decoder (per-token softmax, chain rule) and a globally
conditioned encoder-encoder (dot-product score against a closed response
set) -- and measures how the margin between correct and incorrect outputs
behaves under regularization, sequence length, and beam width.

Submodules
----------
numkernel    float64 LSTM kernel, softmax utilities, Adagrad, gradient checker
corpus       tokenization, capped vocab, negative pool, whitelist, prefix trie
ed_model     encoder-decoder: training, scoring, trie-constrained beam search
ee_model     encoder-encoder: dual encoders, sampled partition, exact retrieval
toymargin    tabular margin experiment with regularization and length sweeps
diagnostics  margin records, recall@K tables, beam-width sweeps, reports
synthetic    synthetic conversational corpora with planted short distractors
cli          command-line front end wiring the above into reproducible runs
"""

__version__ = "0.1.0"

__all__ = [
    "numkernel",
    "corpus",
    "ed_model",
    "ee_model",
    "toymargin",
    "diagnostics",
    "synthetic",
    "checkpoint",
    "cli",
]
