import math

import numpy as np
import pytest
import torch
from torch import nn

from triseg.adapters import MaskDecoder, MaskPromptEncoder, ProposalSet
from triseg.errors import ConfigurationError, PriorError
from triseg.reconstruct import (
    GeometricPromptFuser,
    PromptPack,
    Refiner,
    SemanticProjector,
    project_semantic_token,
    proposal_prior,
    reconstruct_mask,
    resize_prior,
    uniform_prior,
    visual_prior,
)


class TestProjectSemanticToken:
    def test_zero_map_gives_zero(self):
        d = 6
        g = project_semantic_token(
            torch.randn(d), torch.randn(d), torch.zeros(2 * d, d), torch.zeros(d)
        )
        torch.testing.assert_close(g, torch.zeros(d))

    def test_negative_bias_clamped(self):
        d = 6
        g = project_semantic_token(
            torch.randn(d), torch.randn(d), torch.zeros(2 * d, d), -torch.ones(d)
        )
        torch.testing.assert_close(g, torch.zeros(d))

    def test_nonnegative_always(self, rng):
        d = 8
        for _ in range(100):
            g = project_semantic_token(
                torch.tensor(rng.standard_normal(d)),
                torch.tensor(rng.standard_normal(d)),
                torch.tensor(rng.standard_normal((2 * d, d))),
                torch.tensor(rng.standard_normal(d)),
            )
            assert (g >= 0).all()

    def test_matches_loop_oracle(self, rng):
        d = 5
        fg = rng.standard_normal(d)
        bg = rng.standard_normal(d)
        w = rng.standard_normal((2 * d, d))
        b = rng.standard_normal(d)
        stacked = np.concatenate([fg, bg])
        expected = np.maximum(w.T @ stacked + b, 0.0)
        got = project_semantic_token(
            torch.tensor(fg), torch.tensor(bg), torch.tensor(w), torch.tensor(b)
        )
        np.testing.assert_allclose(got.numpy(), expected, rtol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ConfigurationError):
            project_semantic_token(
                torch.randn(6), torch.randn(6), torch.zeros(10, 6), torch.zeros(6)
            )

    def test_module_form(self):
        proj = SemanticProjector(8)
        g = proj(torch.randn(8), torch.randn(8))
        assert g.shape == (8,) and (g >= 0).all()


class TestVisualPrior:
    def _features(self):
        proto = torch.tensor([1.0, 2.0, 2.0], dtype=torch.float64)
        feats = torch.zeros(2, 2, 3, dtype=torch.float64)
        feats[0, 0] = 2.0 * proto  # cos = 1
        feats[0, 1] = torch.tensor([2.0, -1.0, 0.0])  # orthogonal: cos = 0
        feats[1, 0] = -proto  # cos = -1
        feats[1, 1] = proto
        return feats, proto

    def test_logistic_of_cosine(self):
        feats, proto = self._features()
        prior = visual_prior(feats, proto, (2, 2))
        sigma = lambda x: 1.0 / (1.0 + math.exp(-x))
        assert math.isclose(float(prior[0, 0]), sigma(1.0), rel_tol=1e-9)  # ~0.7311
        assert math.isclose(float(prior[0, 1]), 0.5, rel_tol=1e-9)
        assert math.isclose(float(prior[1, 0]), sigma(-1.0), rel_tol=1e-9)  # ~0.2689

    def test_strictly_inside_unit_interval(self, rng):
        feats = torch.tensor(rng.standard_normal((4, 4, 6)))
        proto = torch.tensor(rng.standard_normal(6))
        prior = visual_prior(feats, proto, (16, 16))
        assert prior.shape == (16, 16)
        assert (prior > 0).all() and (prior < 1).all()

    def test_zero_prototype_rejected(self):
        with pytest.raises(PriorError):
            visual_prior(torch.randn(2, 2, 3), torch.zeros(3), (4, 4))


def _proposals(masks, feats):
    return ProposalSet(
        masks=np.asarray(masks, dtype=bool),
        pooled_features=torch.as_tensor(feats, dtype=torch.float64),
    )


class TestProposalPrior:
    def setup_method(self):
        self.identity = nn.Identity()
        self.reference = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)

    def _mask(self, where):
        m = np.zeros((4, 4), dtype=bool)
        m[where] = True
        return m

    def test_nothing_passes_gives_zeros(self):
        props = _proposals([self._mask((0, 0))], [[0.0, 1.0, 0.0]])
        prior = proposal_prior(props, self.reference, 0.5, self.identity)
        assert prior.sum() == 0

    def test_single_passing_proposal(self):
        m = self._mask((slice(0, 2), slice(0, 2)))
        props = _proposals([m], [[1.0, 0.1, 0.0]])
        prior = proposal_prior(props, self.reference, 0.5, self.identity)
        np.testing.assert_array_equal(prior.numpy() > 0.5, m)

    def test_overlapping_union_clamped(self):
        m1 = self._mask((slice(0, 3), slice(0, 3)))
        m2 = self._mask((slice(1, 4), slice(1, 4)))
        props = _proposals([m1, m2], [[1.0, 0.0, 0.0], [0.9, 0.1, 0.0]])
        prior = proposal_prior(props, self.reference, 0.5, self.identity)
        oracle = np.logical_or(m1, m2)  # pixelwise OR, clamped to 1
        np.testing.assert_array_equal(prior.numpy(), oracle.astype(np.float64))
        assert prior.max() == 1.0

    def test_values_exactly_binary(self, rng):
        masks = rng.random((5, 4, 4)) < 0.5
        masks[:, 2, 2] = True
        feats = rng.standard_normal((5, 3))
        props = _proposals(masks, feats)
        prior = proposal_prior(props, self.reference, 0.2, self.identity)
        assert set(np.unique(prior.numpy())) <= {0.0, 1.0}

    def test_monotone_in_delta(self, rng):
        masks = rng.random((6, 4, 4)) < 0.5
        masks[:, 1, 1] = True
        feats = rng.standard_normal((6, 3))
        props = _proposals(masks, feats)
        previous = None
        for delta in (-0.9, -0.5, 0.0, 0.3, 0.7, 0.95):
            area = float(proposal_prior(props, self.reference, delta, self.identity).sum())
            if previous is not None:
                assert area <= previous
            previous = area

    def test_strict_threshold(self):
        m = self._mask((0, 0))
        props = _proposals([m], [[1.0, 0.0, 0.0]])
        # cos == 1.0 with delta == 1.0: strict '>' excludes it
        prior = proposal_prior(props, self.reference, 1.0, self.identity)
        assert prior.sum() == 0


class TestGeometricPromptFuser:
    def test_channel_order_matters(self):
        torch.manual_seed(0)
        enc = MaskPromptEncoder(dense_dim=8, stride=4)
        fuser = GeometricPromptFuser(8)
        a = enc(torch.rand(16, 16))
        b = enc(torch.rand(16, 16))
        c = enc(torch.rand(16, 16))
        out = fuser(a, b, c)
        swapped = fuser(a, c, b)
        assert out.shape == (4, 4, 8)
        assert not torch.allclose(out, swapped)

    def test_zero_priors_compose_zero_responses(self):
        torch.manual_seed(0)
        enc = MaskPromptEncoder(dense_dim=8, stride=4)
        fuser = GeometricPromptFuser(8)
        zeros = torch.zeros(16, 16)
        expected = fuser(*(enc.zero_response(16, 16),) * 3)
        torch.testing.assert_close(fuser(enc(zeros), enc(zeros), enc(zeros)), expected)

    def test_grid_mismatch_rejected(self):
        fuser = GeometricPromptFuser(8)
        with pytest.raises(ConfigurationError):
            fuser(torch.zeros(4, 4, 8), torch.zeros(4, 4, 8), torch.zeros(2, 2, 8))


class TestRefinerAndReconstruct:
    def test_zero_initialized_refiner_is_identity(self):
        torch.manual_seed(0)
        refiner = Refiner(visual_dim=4)
        logits = torch.randn(16, 16)
        feats = torch.randn(4, 4, 4)
        torch.testing.assert_close(refiner(logits, feats), logits)

    def test_reconstruct_shapes_and_prior_resize(self):
        torch.manual_seed(1)
        decoder = MaskDecoder(embed_dim=16, visual_dim=4, dense_dim=8)
        refiner = Refiner(visual_dim=4)
        feats = torch.randn(4, 4, 4)
        pack = PromptPack(
            hq_token=torch.randn(16),
            semantic_tokens=torch.randn(3, 16),
            geometric_embedding=torch.randn(4, 4, 8),
            visual_prior=uniform_prior((16, 16), torch.float32),
            text_prior=torch.zeros(16, 16),
            audio_prior=torch.zeros(16, 16),
        )
        initial, refined = reconstruct_mask(pack, feats, decoder, refiner, (16, 16))
        assert initial.shape == (16, 16) and refined.shape == (16, 16)
        torch.testing.assert_close(refined, initial)  # refiner still zero-init

    def test_resize_policy(self):
        binary = torch.zeros(4, 4)
        binary[1, 1] = 1.0
        up = resize_prior(binary, (8, 8), binary=True)
        assert set(up.unique().tolist()) <= {0.0, 1.0}  # nearest keeps it binary
        smooth = resize_prior(torch.rand(4, 4), (8, 8), binary=False)
        assert smooth.shape == (8, 8)
