"""CTC scoring and greedy decoding.

Posteriors are (T, C) log-probabilities whose last column is the blank unless
``blank`` says otherwise. The forward recursion runs in log space over the
blank-interleaved label sequence and is written with differentiable tensor
ops, so the loss gradient comes from the tape rather than a hand-written
backward pass.
"""
import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np
import torch

from .numerics import NEG_INF, logsumexp


class InfeasibleAlignmentError(ValueError):
    """Raised when a target cannot be emitted in the available frames."""


@dataclass
class CtcGreedyResult:
    tokens: List[int]
    confidences: List[float]
    frame_spans: List[Tuple[int, int]]
    path: List[int] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.tokens) == len(self.confidences) == len(self.frame_spans)):
            raise ValueError("tokens, confidences and frame_spans must have equal length")


def _blank_index(n_classes, blank):
    return n_classes - 1 if blank is None else int(blank)


def collapse(path: Sequence[int], blank: int) -> List[int]:
    """Merge adjacent duplicates, then drop blanks."""
    out = []
    prev = None
    for a in path:
        a = int(a)
        if a != prev and a != blank:
            out.append(a)
        prev = a
    return out


def min_frames(y: Sequence[int]) -> int:
    """Fewest frames that can emit ``y``: one per token plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(y, y[1:]) if a == b)
    return len(y) + repeats


def _as_log_probs(posteriors):
    if isinstance(posteriors, torch.Tensor):
        return posteriors
    return torch.as_tensor(np.asarray(posteriors, dtype=np.float64))


def ctc_forward_batch(log_probs, input_lengths, targets, blank=None):
    """Log-likelihood of each target under batched posteriors.

    log_probs: (B, T, C) tensor; input_lengths: valid frames per row;
    targets: list of token lists. Rows whose target is infeasible come out
    near ``NEG_INF``; callers decide how to treat them.
    """
    B, T, C = log_probs.shape
    blank = _blank_index(C, blank)
    lengths = torch.as_tensor(list(input_lengths), dtype=torch.long)
    L = max((len(y) for y in targets), default=0)
    S = 2 * L + 1

    ext = torch.full((B, S), blank, dtype=torch.long)
    for b, y in enumerate(targets):
        if len(y):
            ext[b, 1 : 2 * len(y) : 2] = torch.as_tensor(list(y), dtype=torch.long)
    # skip transition s-2 -> s allowed onto a label that differs from the previous label
    skip = torch.zeros((B, S), dtype=torch.bool)
    if S > 2:
        skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    lp = log_probs.clamp(min=NEG_INF)
    emit = torch.gather(lp, 2, ext.unsqueeze(1).expand(B, T, S))

    neg = torch.full((B, 1), NEG_INF, dtype=lp.dtype)
    init = torch.full((B, S), NEG_INF, dtype=lp.dtype)
    init[:, 0] = 0.0
    if S > 1:
        has_label = torch.as_tensor([len(y) > 0 for y in targets])
        init[:, 1] = torch.where(has_label, torch.zeros(B, dtype=lp.dtype), neg.squeeze(1))
    alpha = init + emit[:, 0]
    skip_fill = torch.full((B, S), NEG_INF, dtype=lp.dtype)
    for t in range(1, T):
        stay = alpha
        step = torch.cat([neg, alpha[:, :-1]], dim=1)
        if S > 2:
            jump = torch.cat([neg, neg, alpha[:, :-2]], dim=1)
            jump = torch.where(skip, jump, skip_fill)
        else:
            jump = skip_fill
        new = logsumexp(torch.stack([stay, step, jump]), dim=0) + emit[:, t]
        alpha = torch.where((t < lengths).unsqueeze(1), new, alpha)

    ends = []
    for b, y in enumerate(targets):
        last = 2 * len(y)
        if last == 0:
            ends.append(alpha[b, 0])
        else:
            ends.append(logsumexp(alpha[b, last - 1 : last + 1], dim=0))
    return torch.stack(ends)


def _ctc_log_prob_tensor(posteriors, y, blank=None):
    lp = _as_log_probs(posteriors)
    if lp.dim() != 2:
        raise ValueError("posteriors must be a (T, C) matrix")
    return ctc_forward_batch(lp.unsqueeze(0), [lp.shape[0]], [list(y)], blank)[0]


def ctc_log_prob(posteriors, y: Sequence[int], blank=None) -> float:
    """log P(y | X) summed over every alignment; ``-inf`` when no alignment fits."""
    lp = _as_log_probs(posteriors)
    if min_frames(y) > lp.shape[0]:
        return float("-inf")
    with torch.no_grad():
        return float(_ctc_log_prob_tensor(lp, y, blank))


def ctc_loss(posteriors, y: Sequence[int], blank=None):
    """Negative CTC log-likelihood as a differentiable scalar."""
    lp = _as_log_probs(posteriors)
    if min_frames(y) > lp.shape[0]:
        raise InfeasibleAlignmentError(
            f"target of length {len(y)} needs {min_frames(y)} frames, got {lp.shape[0]}"
        )
    return -_ctc_log_prob_tensor(lp, y, blank)


def ctc_loss_batch(log_probs, input_lengths, targets, blank=None):
    """Per-utterance negative log-likelihoods; raises if any target is infeasible."""
    for n, y in zip(input_lengths, targets):
        if min_frames(y) > int(n):
            raise InfeasibleAlignmentError(
                f"target of length {len(y)} needs {min_frames(y)} frames, got {int(n)}"
            )
    return -ctc_forward_batch(log_probs, input_lengths, targets, blank)


@lru_cache(maxsize=32)
def _enumerate_paths(T, C, blank):
    paths = np.array(list(itertools.product(range(C), repeat=T)), dtype=np.int64)
    outputs = [tuple(collapse(p, blank)) for p in paths]
    return paths, outputs


def _path_log_probs(lp, paths):
    T = lp.shape[0]
    return lp[np.arange(T)[None, :], paths].sum(axis=1)


def ctc_log_prob_oracle(posteriors, y: Sequence[int], blank=None) -> float:
    """Brute-force log P(y | X) by enumerating every frame-level path. Test oracle only."""
    lp = np.asarray(
        posteriors.detach().numpy() if isinstance(posteriors, torch.Tensor) else posteriors,
        dtype=np.float64,
    )
    T, C = lp.shape
    if T > 8 or C > 5:
        raise ValueError("enumeration oracle limited to T <= 8 frames and |V| <= 4")
    blank = _blank_index(C, blank)
    paths, outputs = _enumerate_paths(T, C, blank)
    target = tuple(int(a) for a in y)
    hit = np.array([o == target for o in outputs])
    if not hit.any():
        return float("-inf")
    scores = _path_log_probs(lp, paths[hit])
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum()))


def ctc_output_distribution(posteriors, blank=None):
    """Map every collapsed output reachable from the posteriors to its probability (oracle)."""
    lp = np.asarray(posteriors, dtype=np.float64)
    T, C = lp.shape
    if T > 8 or C > 5:
        raise ValueError("enumeration oracle limited to T <= 8 frames and |V| <= 4")
    paths, outputs = _enumerate_paths(T, C, _blank_index(C, blank))
    probs = np.exp(_path_log_probs(lp, paths))
    dist = {}
    for o, p in zip(outputs, probs):
        dist[o] = dist.get(o, 0.0) + p
    return dist


def greedy_decode(posteriors, blank=None, confidence="max") -> CtcGreedyResult:
    """Best-path decode with per-token confidences and frame spans.

    ``confidence`` picks how a token's frame posteriors are pooled over its
    emission span: ``"max"`` (default), ``"mean"`` or ``"first"``.
    """
    lp = _as_log_probs(posteriors).detach()
    T, C = lp.shape
    blank = _blank_index(C, blank)
    path = lp.argmax(dim=1).tolist()
    probs = lp.exp()

    tokens, confs, spans = [], [], []
    t = 0
    while t < T:
        a = path[t]
        end = t
        while end + 1 < T and path[end + 1] == a:
            end += 1
        if a != blank:
            p = probs[t : end + 1, a]
            if confidence == "max":
                c = float(p.max())
            elif confidence == "mean":
                c = float(p.mean())
            elif confidence == "first":
                c = float(p[0])
            else:
                raise ValueError(f"unknown confidence rule {confidence!r}")
            tokens.append(a)
            confs.append(c)
            spans.append((t, end))
        t = end + 1
    return CtcGreedyResult(tokens, confs, spans, path)
