"""Look-back decoding: KL-divergence tracking against history and prefix during generation."""

from lookback.core import (
    EOT,
    EOT_ID,
    UNK,
    UNK_ID,
    ProbDist,
    Vocabulary,
    detokenize,
    dist_entropy,
    dist_normalize,
    dist_top_k,
    tokenize,
)
from lookback.decode import (
    DecodeConfig,
    GenerationRecord,
    StepRecord,
    decode,
    decode_contrastive,
    decode_greedy,
    decode_lookback,
    decode_sampling,
    softmax_neg,
    truncate_eta,
    truncate_nucleus,
    truncate_typical,
)
from lookback.divergence import (
    DistHistory,
    StepSignals,
    kl_divergence,
    lookahead_prefix_kl,
    min_kl_history,
    min_kl_prefix,
    pairwise_kl_matrix,
)
from lookback.kernels import BACKEND as KERNEL_BACKEND
from lookback.lm import NGramModel, RemoteLM, RemoteLMConfig, load_model, remote_next_dist, save_model, train_ngram
from lookback.mauve import MauveConfig, mauve, mauve_from_embeddings
from lookback.metrics import TfidfEmbedder, coherence, diversity, embed_tfidf, rep_n

__version__ = "0.1.0"
