import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from triseg.adapters import ProposalSet
from triseg.decompose import (
    average_decompositions,
    decompose_visual,
    downsample_mask,
    overlap_ratio,
    partition_proposals,
    pool_prototype,
)
from triseg.errors import EmptyRegionError, InputError


def _proposal_set(masks, visual_dim=3):
    masks = np.asarray(masks, dtype=bool)
    pooled = torch.zeros(masks.shape[0], visual_dim, dtype=torch.float64)
    return ProposalSet(masks=masks, pooled_features=pooled)


def _oracle_overlap(proposal, support):
    inter = 0
    area = 0
    for y in range(proposal.shape[0]):
        for x in range(proposal.shape[1]):
            if proposal[y, x]:
                area += 1
                if support[y, x]:
                    inter += 1
    return inter / area


class TestOverlapRatio:
    def test_subset_is_one(self):
        p = np.zeros((4, 4), dtype=bool)
        p[1:3, 1:3] = True
        m = np.ones((4, 4), dtype=bool)
        assert overlap_ratio(p, m) == 1.0

    def test_disjoint_is_zero(self):
        p = np.zeros((4, 4), dtype=bool)
        p[0, 0] = True
        m = np.zeros((4, 4), dtype=bool)
        m[3, 3] = True
        assert overlap_ratio(p, m) == 0.0

    def test_half_inside(self):
        # 4-pixel proposal, 2 pixels inside the mask, on a 4x4 grid
        p = np.zeros((4, 4), dtype=bool)
        p[0, 0] = p[0, 1] = p[1, 0] = p[1, 1] = True
        m = np.zeros((4, 4), dtype=bool)
        m[0, :] = True
        assert overlap_ratio(p, m) == _oracle_overlap(p, m) == 0.5

    def test_empty_proposal_rejected(self):
        with pytest.raises(EmptyRegionError):
            overlap_ratio(np.zeros((4, 4), dtype=bool), np.ones((4, 4), dtype=bool))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            overlap_ratio(np.ones((4, 4), dtype=bool), np.ones((5, 5), dtype=bool))

    @given(
        hnp.arrays(bool, (6, 6)),
        hnp.arrays(bool, (6, 6)),
    )
    @settings(max_examples=200, deadline=None)
    def test_matches_counting_oracle(self, p, m):
        if not p.any():
            return
        assert overlap_ratio(p, m) == _oracle_overlap(p, m)

    @given(hnp.arrays(bool, (5, 5)), hnp.arrays(bool, (5, 5)))
    @settings(max_examples=100, deadline=None)
    def test_scale_free_under_upsampling(self, p, m):
        if not p.any():
            return
        p2 = np.repeat(np.repeat(p, 2, axis=0), 2, axis=1)
        m2 = np.repeat(np.repeat(m, 2, axis=0), 2, axis=1)
        assert overlap_ratio(p, m) == overlap_ratio(p2, m2)

    @given(hnp.arrays(bool, (5, 5)), hnp.arrays(bool, (5, 5)), st.integers(0, 24))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_support_mask(self, p, m, flat):
        if not p.any():
            return
        grown = m.copy()
        grown[np.unravel_index(flat, m.shape)] = True
        assert overlap_ratio(p, grown) >= overlap_ratio(p, m)


class TestPartitionProposals:
    def test_exact_half_goes_negative(self):
        # strict '>', so OR == tau lands in the negative set
        p = np.zeros((4, 4), dtype=bool)
        p[0, :2] = True  # 2 pixels, 1 inside
        m = np.zeros((4, 4), dtype=bool)
        m[0, 0] = True
        props = _proposal_set([p])
        pos, neg = partition_proposals(props, m, tau=0.5)
        assert pos == () and neg == (0,)

    def test_just_above_threshold_goes_positive(self):
        p = np.zeros((10, 10), dtype=bool)
        p[0] = True  # 10 pixels
        m = np.zeros((10, 10), dtype=bool)
        m[0, :6] = True  # OR = 0.6 > 0.5
        pos, neg = partition_proposals(_proposal_set([p]), m, tau=0.5)
        assert pos == (0,)

    def test_tau_out_of_range(self):
        p = np.ones((2, 2), dtype=bool)
        for tau in (0.0, 1.0, -0.2):
            with pytest.raises(InputError):
                partition_proposals(_proposal_set([p]), p, tau=tau)

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(100):
            masks = rng.random((5, 8, 8)) < 0.4
            masks[:, 0, 0] = True  # keep proposals nonempty
            support = rng.random((8, 8)) < 0.5
            tau = float(rng.uniform(0.1, 0.9))
            pos, neg = partition_proposals(_proposal_set(masks), support, tau=tau)
            expected_pos = tuple(
                i for i, m in enumerate(masks) if _oracle_overlap(m, support) > tau
            )
            expected_neg = tuple(i for i in range(len(masks)) if i not in expected_pos)
            assert pos == expected_pos
            assert neg == expected_neg
            assert sorted(pos + neg) == list(range(len(masks)))


class TestPoolPrototype:
    def test_constant_field(self):
        feats = torch.full((4, 4, 3), 2.5, dtype=torch.float64)
        mask = np.zeros((8, 8), dtype=bool)
        mask[:4, :4] = True
        torch.testing.assert_close(
            pool_prototype(feats, mask), torch.full((3,), 2.5, dtype=torch.float64)
        )

    def test_single_cell_mask(self):
        feats = torch.arange(4 * 4 * 2, dtype=torch.float64).reshape(4, 4, 2)
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:4, 4:6] = True  # covers exactly grid cell (1, 2)
        torch.testing.assert_close(pool_prototype(feats, mask), feats[1, 2])

    def test_half_mask_matches_hand_mean(self, rng):
        feats = torch.tensor(rng.standard_normal((4, 4, 3)))
        mask = np.zeros((4, 4), dtype=bool)
        mask[:2, :] = True  # grid == mask resolution here
        expected = feats[:2, :, :].reshape(-1, 3).mean(dim=0)
        torch.testing.assert_close(pool_prototype(feats, mask), expected)

    def test_empty_at_grid_resolution(self):
        feats = torch.zeros(4, 4, 3, dtype=torch.float64)
        mask = np.zeros((16, 16), dtype=bool)
        mask[0, 0] = True  # 1/16 of a cell: area-average 0.0625 < 0.5
        with pytest.raises(EmptyRegionError):
            pool_prototype(feats, mask)

    def test_permutation_invariant_over_mask_positions(self, rng):
        feats = torch.tensor(rng.standard_normal((4, 4, 3)))
        mask = np.zeros((4, 4), dtype=bool)
        mask[rng.random((4, 4)) < 0.5] = True
        mask[0, 0] = True
        on = np.argwhere(downsample_mask(mask, (4, 4)))
        shuffled = feats.clone()
        perm = rng.permutation(len(on))
        for (y, x), src in zip(on, on[perm]):
            shuffled[y, x] = feats[src[0], src[1]]
        torch.testing.assert_close(
            pool_prototype(feats, mask), pool_prototype(shuffled, mask)
        )

    def test_linearity(self, rng):
        f1 = torch.tensor(rng.standard_normal((4, 4, 3)))
        f2 = torch.tensor(rng.standard_normal((4, 4, 3)))
        mask = rng.random((8, 8)) < 0.6
        if not downsample_mask(mask, (4, 4)).any():
            mask[:2, :2] = True
        combo = pool_prototype(2.0 * f1 - 3.0 * f2, mask)
        parts = 2.0 * pool_prototype(f1, mask) - 3.0 * pool_prototype(f2, mask)
        torch.testing.assert_close(combo, parts)

    def test_matches_loop_oracle(self, rng):
        for _ in range(100):
            feats = torch.tensor(rng.standard_normal((4, 4, 3)))
            mask = rng.random((8, 8)) < 0.5
            on = downsample_mask(mask, (4, 4))
            if not on.any():
                continue
            acc = torch.zeros(3, dtype=torch.float64)
            count = 0
            for y in range(4):
                for x in range(4):
                    if on[y, x]:
                        acc += feats[y, x]
                        count += 1
            torch.testing.assert_close(pool_prototype(feats, mask), acc / count)


class TestDecomposeVisual:
    def test_support_mask_as_only_proposal(self, rng):
        feats = torch.tensor(rng.standard_normal((4, 4, 3)))
        mask = np.zeros((8, 8), dtype=bool)
        mask[:4, :] = True
        out = decompose_visual(feats, mask, _proposal_set([mask]))
        assert out.positive_indices == (0,)
        torch.testing.assert_close(out.positive_prototype, out.support_prototype)

    def test_no_positive_falls_back_to_support(self, rng):
        feats = torch.tensor(rng.standard_normal((4, 4, 3)))
        support = np.zeros((8, 8), dtype=bool)
        support[:4, :] = True
        outside = ~support
        out = decompose_visual(feats, support, _proposal_set([outside]))
        assert out.positive_indices == ()
        torch.testing.assert_close(out.positive_prototype, out.support_prototype)

    def test_no_negative_uses_outside_mean(self, rng):
        feats = torch.tensor(rng.standard_normal((4, 4, 3)))
        support = np.zeros((8, 8), dtype=bool)
        support[:4, :] = True
        out = decompose_visual(feats, support, _proposal_set([support]))
        assert out.negative_indices == ()
        torch.testing.assert_close(
            out.negative_prototype, pool_prototype(feats, ~support)
        )

    def test_prototypes_match_naive_oracle(self, rng):
        feats = torch.tensor(rng.standard_normal((4, 4, 3)))
        support = rng.random((8, 8)) < 0.5
        support[:2, :4] = True
        masks = rng.random((6, 8, 8)) < 0.4
        masks[:, 4, 4] = True
        props = _proposal_set(masks)
        out = decompose_visual(feats, support, props)

        def naive_pool(mask):
            on = downsample_mask(mask, (4, 4))
            vecs = [feats[y, x] for y in range(4) for x in range(4) if on[y, x]]
            return torch.stack(vecs).mean(dim=0)

        torch.testing.assert_close(out.support_prototype, naive_pool(support))
        if out.positive_indices:
            union = np.zeros((8, 8), dtype=bool)
            for i in out.positive_indices:
                union |= masks[i]
            torch.testing.assert_close(out.positive_prototype, naive_pool(union))

    def test_kshot_average(self, rng):
        feats = [torch.tensor(rng.standard_normal((4, 4, 3))) for _ in range(3)]
        support = np.zeros((8, 8), dtype=bool)
        support[2:6, 2:6] = True
        parts = [
            decompose_visual(f, support, _proposal_set([support])) for f in feats
        ]
        merged = average_decompositions(parts)
        torch.testing.assert_close(
            merged.support_prototype,
            torch.stack([p.support_prototype for p in parts]).mean(dim=0),
        )
