"""Pure numpy KL kernels, used when the compiled extension is unavailable."""

import numpy as np


def kl_rows(p: np.ndarray, log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """KL(p || q_j) for every row j of ``log_q`` (rows are log-probabilities)."""
    log_q = np.asarray(log_q, dtype=np.float64)
    if log_q.ndim != 2 or log_q.shape[1] != p.shape[0] or log_p.shape[0] != p.shape[0]:
        raise ValueError("length mismatch")
    out = (p * (log_p - log_q)).sum(axis=1)
    return np.maximum(out, 0.0)


def pairwise_kl(probs: np.ndarray, log_probs: np.ndarray) -> np.ndarray:
    """M[i, j] = KL(row_i || row_j)."""
    if probs.shape != log_probs.shape:
        raise ValueError("length mismatch")
    neg_ent = (probs * log_probs).sum(axis=1)
    out = neg_ent[:, None] - probs @ log_probs.T
    np.fill_diagonal(out, 0.0)
    return np.maximum(out, 0.0)
