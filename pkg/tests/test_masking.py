import math

import numpy as np
import pytest
import torch

from maskctc.masking import (
    DlpSample,
    MaskedSequence,
    combined_loss,
    dlp_loss,
    insert_masks,
    make_deletion_sample,
    make_insertion_sample,
    merge_masks,
    mlm_loss,
    sample_mlm_mask,
)
from maskctc.numerics import Rng

M = 99
Y = [11, 12, 13, 14]


def test_masked_sequence_invariant():
    s = MaskedSequence([1, M, 3], (1,), M)
    assert s.observed_positions == (0, 2)
    with pytest.raises(ValueError):
        MaskedSequence([1, M, 3], (0,), M)


def test_single_token_always_masked():
    for seed in range(20):
        s = sample_mlm_mask([5], Rng(seed), M)
        assert s.tokens == [M]


def test_mlm_mask_is_seeded():
    a = sample_mlm_mask(Y, Rng(3), M)
    b = sample_mlm_mask(Y, Rng(3), M)
    assert a == b


def test_mlm_mask_count_is_uniform():
    rng = Rng(0)
    counts = [len(sample_mlm_mask(Y, rng, M).masked_positions) for _ in range(100_000)]
    assert abs(np.mean(counts) - 2.5) < 0.02
    assert set(counts) == {1, 2, 3, 4}


def test_mlm_mask_rejects_empty():
    with pytest.raises(ValueError):
        sample_mlm_mask([], Rng(0), M)


def test_deletion_worked_examples():
    s = merge_masks(Y, [1, 2], M)
    assert s.masked.tokens == [11, M, 14]
    assert s.length_labels == {1: 2}
    s = merge_masks(Y, [0], M)
    assert s.masked.tokens == [M, 12, 13, 14] and s.length_labels == {0: 1}
    s = merge_masks(Y, [0, 1, 2, 3], M)
    assert s.masked.tokens == [M] and s.length_labels == {0: 4}


@pytest.mark.parametrize("L", range(1, 9))
def test_deletion_labels_reconstruct_length(L):
    y = list(range(L))
    for seed in range(40):
        s = make_deletion_sample(y, Rng(seed), M)
        assert s.kind == "deletion"
        assert all(v >= 1 for v in s.length_labels.values())
        assert sum(s.length_labels.values()) + len(s.masked.observed_positions) == L
        # consecutive masks never survive merging
        assert all(not (a == M and b == M) for a, b in zip(s.masked.tokens, s.masked.tokens[1:]))


def test_deletion_long_runs_respect_class_cap():
    y = [i % 10 for i in range(120)]
    for seed in range(10):
        s = make_deletion_sample(y, Rng(seed), M, retries=0)
        assert max(s.length_labels.values()) <= 50
        assert sum(s.length_labels.values()) + len(s.masked.observed_positions) == 120


def test_insertion_worked_examples():
    s = insert_masks(Y, [3], M)
    assert s.masked.tokens == [11, 12, 13, M, 14] and s.length_labels == {3: 0}
    s = insert_masks(Y, [0], M)
    assert s.masked.tokens == [M, 11, 12, 13, 14]
    s = insert_masks(Y, [2, 2], M)
    assert s.masked.tokens == [11, 12, M, M, 13, 14] and s.length_labels == {2: 0, 3: 0}


def test_insertion_properties():
    for L in range(0, 12):
        y = list(range(L))
        for seed in range(20):
            s = make_insertion_sample(y, Rng(seed), M)
            assert len(s.masked) > L
            assert len(s.masked) - L <= max(1, math.ceil(L / 4))
            assert [t for t in s.masked.tokens if t != M] == y
            assert all(v == 0 for v in s.length_labels.values())
    assert make_insertion_sample(Y, Rng(4), M) == make_insertion_sample(Y, Rng(4), M)


def test_sample_kind_invariants():
    with pytest.raises(ValueError):
        DlpSample(MaskedSequence([M], (0,), M), {0: 0}, "deletion")
    with pytest.raises(ValueError):
        DlpSample(MaskedSequence([M], (0,), M), {0: 2}, "insertion")


def _onehot_log_probs(targets, V):
    lp = np.full((len(targets), V), -1e4)
    lp[np.arange(len(targets)), targets] = 0.0
    return torch.as_tensor(lp)


def test_mlm_loss_values():
    ref = [1, 2, 3, 4]
    masked = MaskedSequence([1, M, M, M], (1, 2, 3), M)
    assert mlm_loss(_onehot_log_probs(ref, 10), masked, ref).item() == pytest.approx(0.0, abs=1e-12)
    uniform = torch.full((4, 10), -math.log(10), dtype=torch.float64)
    assert mlm_loss(uniform, masked, ref).item() == pytest.approx(3 * math.log(10))
    unmasked = MaskedSequence([1, 2, 3, 4], (), M)
    assert mlm_loss(uniform, unmasked, ref).item() == 0.0


def test_mlm_loss_gradient_only_at_masked_rows():
    ref = [1, 2, 3, 4]
    masked = MaskedSequence([1, M, 3, M], (1, 3), M)
    z = torch.as_tensor(np.random.default_rng(0).normal(size=(4, 10)), dtype=torch.float64).requires_grad_(True)
    mlm_loss(torch.log_softmax(z, dim=1), masked, ref).backward()
    row_norms = z.grad.abs().sum(dim=1)
    assert row_norms[0] == 0 and row_norms[2] == 0
    assert row_norms[1] > 0 and row_norms[3] > 0


def test_dlp_loss_values():
    s = merge_masks([1, 2, 3, 4, 5], [1, 2, 4], M)  # [1, M, 4, M] labels {1: 2, 3: 1}
    perfect = _onehot_log_probs([0, 2, 0, 1], 51)
    assert dlp_loss(perfect, s).item() == pytest.approx(0.0, abs=1e-12)
    uniform = torch.full((4, 51), -math.log(51), dtype=torch.float64)
    assert dlp_loss(uniform, s).item() == pytest.approx(2 * math.log(51))


def test_dlp_loss_ignores_unmasked_rows():
    s = insert_masks([1, 2], [1], M)  # [1, M, 2]
    lp = torch.full((3, 51), -math.log(51), dtype=torch.float64)
    base = dlp_loss(lp, s).item()
    lp2 = lp.clone()
    lp2[0] = torch.log_softmax(torch.arange(51, dtype=torch.float64), 0)
    lp2[2] = lp2[0]
    assert dlp_loss(lp2, s).item() == base


def test_dlp_loss_rejects_out_of_range_label():
    s = merge_masks([1, 2, 3], [0, 1, 2], M)
    with pytest.raises(ValueError):
        dlp_loss(torch.zeros(1, 3, dtype=torch.float64), s)


def test_combined_loss():
    c, m, d = torch.tensor(2.0), torch.tensor(3.0), torch.tensor(5.0)
    assert combined_loss(c, m, d).item() == pytest.approx(0.3 * 2 + 0.7 * 3 + 1.0 * 5)
    assert combined_loss(c, m, d, alpha=1.0, beta=0.0).item() == 2.0
    with pytest.raises(ValueError):
        combined_loss(c, m, d, alpha=1.5)
