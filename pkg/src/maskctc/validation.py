"""Input checks shared by the estimator and the command line."""
import numbers

import numpy as np
from sklearn.utils.validation import check_array


def check_features(X, input_dim=None, min_frames=1):
    """One utterance or a list of them -> list of float64 (T, D) arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if not isinstance(X, (list, tuple)) or not X:
        raise ValueError("expected a non-empty sequence of (frames, dim) feature matrices")
    out = []
    for i, x in enumerate(X):
        a = check_array(x, dtype=np.float64, ensure_2d=True, ensure_min_samples=min_frames)
        if input_dim is not None and a.shape[1] != input_dim:
            raise ValueError(f"utterance {i}: feature dim {a.shape[1]} != {input_dim}")
        out.append(a)
    dims = {a.shape[1] for a in out}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims {sorted(dims)}")
    return out


def check_token_sequences(y, vocab_size, n=None):
    """List of integer token lists with ids in ``[0, vocab_size)``."""
    if isinstance(y, np.ndarray):
        y = y.tolist()
    if not isinstance(y, (list, tuple)):
        raise ValueError("expected a sequence of token sequences")
    if n is not None and len(y) != n:
        raise ValueError(f"got {len(y)} token sequences for {n} utterances")
    out = []
    for i, seq in enumerate(y):
        seq = list(np.asarray(seq).ravel().tolist()) if not isinstance(seq, list) else seq
        if not all(isinstance(t, numbers.Integral) for t in seq):
            raise ValueError(f"sequence {i}: tokens must be integers")
        if any(not 0 <= t < vocab_size for t in seq):
            raise ValueError(f"sequence {i}: token id outside [0, {vocab_size})")
        out.append([int(t) for t in seq])
    return out


def check_probability(p, name):
    if not isinstance(p, numbers.Real) or not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p!r}")
    return float(p)


def check_positive_int(v, name, minimum=1):
    if not isinstance(v, numbers.Integral) or isinstance(v, bool) or v < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {v!r}")
    return int(v)
