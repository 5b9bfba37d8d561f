"""Training-time masking: masked-token targets and mask-length targets.

Three kinds of masked input are built from a reference sequence:

* token masking, where a uniformly sized random subset is replaced by the mask id;
* deletion-style samples, where each run of adjacent masks collapses to one
  mask labelled with the run length;
* insertion-style samples, where extra masks are spliced in and labelled 0.
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

from .model import MAX_LENGTH_CLASS
from .numerics import cross_entropy


@dataclass
class MaskedSequence:
    tokens: List[int]
    masked_positions: Tuple[int, ...]
    mask_id: int

    def __post_init__(self):
        self.tokens = [int(t) for t in self.tokens]
        self.masked_positions = tuple(sorted(int(i) for i in self.masked_positions))
        actual = tuple(i for i, t in enumerate(self.tokens) if t == self.mask_id)
        if actual != self.masked_positions:
            raise ValueError("masked_positions must be exactly the positions holding the mask id")

    @property
    def observed_positions(self):
        masked = set(self.masked_positions)
        return tuple(i for i in range(len(self.tokens)) if i not in masked)

    def __len__(self):
        return len(self.tokens)


@dataclass
class DlpSample:
    masked: MaskedSequence
    length_labels: Dict[int, int]
    kind: str

    def __post_init__(self):
        if self.kind not in ("deletion", "insertion"):
            raise ValueError(f"unknown sample kind {self.kind!r}")
        if set(self.length_labels) != set(self.masked.masked_positions):
            raise ValueError("length labels must cover exactly the masked positions")
        if self.kind == "deletion" and any(v < 1 for v in self.length_labels.values()):
            raise ValueError("deletion labels must be >= 1")
        if self.kind == "insertion" and any(v != 0 for v in self.length_labels.values()):
            raise ValueError("insertion labels must be 0")


def mask_positions(y: Sequence[int], positions, mask_id) -> MaskedSequence:
    positions = set(int(p) for p in positions)
    tokens = [mask_id if i in positions else int(t) for i, t in enumerate(y)]
    return MaskedSequence(tokens, tuple(sorted(positions)), mask_id)


def _sample_count_and_positions(L, rng):
    n = int(rng.integers(1, L + 1))
    return sorted(int(p) for p in rng.choice(L, size=n, replace=False))


def sample_mlm_mask(y: Sequence[int], rng, mask_id) -> MaskedSequence:
    """Mask ``N ~ Uniform{1..L}`` distinct positions chosen uniformly."""
    if len(y) == 0:
        raise ValueError("cannot mask an empty sequence")
    return mask_positions(y, _sample_count_and_positions(len(y), rng), mask_id)


def merge_masks(y: Sequence[int], positions, mask_id, max_class=MAX_LENGTH_CLASS) -> DlpSample:
    """Collapse each run of adjacent masked positions to a single mask labelled with the run length."""
    positions = set(int(p) for p in positions)
    tokens, labels = [], {}
    i = 0
    while i < len(y):
        if i in positions:
            j = i
            while j + 1 < len(y) and j + 1 in positions:
                j += 1
            run = j - i + 1
            if run > max_class:
                raise ValueError(f"mask run of {run} exceeds the largest length class {max_class}")
            labels[len(tokens)] = run
            tokens.append(mask_id)
            i = j + 1
        else:
            tokens.append(int(y[i]))
            i += 1
    return DlpSample(MaskedSequence(tokens, tuple(labels), mask_id), labels, "deletion")


def _longest_run(positions):
    best = run = 0
    prev = None
    for p in positions:
        run = run + 1 if prev is not None and p == prev + 1 else 1
        best = max(best, run)
        prev = p
    return best


def make_deletion_sample(y: Sequence[int], rng, mask_id, max_class=MAX_LENGTH_CLASS, retries=10) -> DlpSample:
    """Random mask pattern as for token masking, with runs merged into single masks.

    Patterns whose longest run exceeds ``max_class`` are redrawn up to
    ``retries`` times; after that every ``max_class + 1``-th position of an
    overlong run is left observed so each run fits the classifier.
    """
    if len(y) == 0:
        raise ValueError("cannot mask an empty sequence")
    for _ in range(retries + 1):
        positions = _sample_count_and_positions(len(y), rng)
        if _longest_run(positions) <= max_class:
            return merge_masks(y, positions, mask_id, max_class)
    kept, run, prev = [], 0, None
    for p in positions:
        run = run + 1 if prev is not None and p == prev + 1 else 1
        prev = p
        if run > max_class:
            run = 0
            continue
        kept.append(p)
    return merge_masks(y, kept, mask_id, max_class)


def insert_masks(y: Sequence[int], gaps, mask_id) -> DlpSample:
    """Insert one mask per entry of ``gaps``; gap ``g`` sits before ``y[g]`` (``g == len(y)`` appends)."""
    counts = [0] * (len(y) + 1)
    for g in gaps:
        g = int(g)
        if not 0 <= g <= len(y):
            raise ValueError(f"gap {g} out of range for length {len(y)}")
        counts[g] += 1
    tokens, labels = [], {}
    for i in range(len(y) + 1):
        for _ in range(counts[i]):
            labels[len(tokens)] = 0
            tokens.append(mask_id)
        if i < len(y):
            tokens.append(int(y[i]))
    return DlpSample(MaskedSequence(tokens, tuple(labels), mask_id), labels, "insertion")


def make_insertion_sample(y: Sequence[int], rng, mask_id) -> DlpSample:
    """Insert ``k ~ Uniform{1..max(1, ceil(L/4))}`` masks at uniformly drawn gaps, each labelled 0."""
    L = len(y)
    k = int(rng.integers(1, max(1, math.ceil(L / 4)) + 1))
    gaps = rng.integers(0, L + 1, size=k)
    return insert_masks(y, gaps, mask_id)


def mlm_loss(log_probs, masked: MaskedSequence, reference: Sequence[int]):
    """Summed NLL of the reference tokens at masked positions; observed positions are ignored."""
    if len(reference) != len(masked):
        raise ValueError("reference and masked sequence lengths differ")
    pos = list(masked.masked_positions)
    if not pos:
        return log_probs.sum() * 0.0
    targets = [int(reference[i]) for i in pos]
    return cross_entropy(log_probs[pos], targets)


def dlp_loss(length_log_probs, sample: DlpSample):
    """Summed NLL of the length class at each mask of ``sample``."""
    labels = sample.length_labels
    n_classes = length_log_probs.shape[-1]
    if any(not 0 <= v < n_classes for v in labels.values()):
        raise ValueError(f"length label outside 0..{n_classes - 1}")
    if not labels:
        return length_log_probs.sum() * 0.0
    pos = sorted(labels)
    return cross_entropy(length_log_probs[pos], [labels[p] for p in pos])


def combined_loss(ctc_nll, mlm_nll, dlp_nll, alpha=0.3, beta=1.0):
    """``alpha * ctc + (1 - alpha) * mlm + beta * dlp`` on negative log-likelihoods."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if beta < 0.0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    return alpha * ctc_nll + (1.0 - alpha) * mlm_nll + beta * dlp_nll
