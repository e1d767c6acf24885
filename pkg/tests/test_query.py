import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from helpers import make_camera, random_field

from gsfield.codec import MlpCodec
from gsfield.errors import ShapeError, UsageError
from gsfield.query import (EmbeddingDictionary, pca_visualize, query_view,
                           relevancy_score, select_branch_strategy)
from gsfield.raster import render


def orthonormal_rows(n, d, seed=0):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, n)))
    return q.T[:n]


class TestRelevancyScore:
    def test_symmetric_dots_give_half(self):
        vecs = orthonormal_rows(3, 8)
        feat = vecs[0]
        # query and canonicals all orthogonal to feat -> every dot is zero
        assert relevancy_score(feat, vecs[1], vecs[2][None]) == pytest.approx(0.5)

    def test_exact_match_with_orthogonal_canonicals(self):
        vecs = orthonormal_rows(4, 8)
        score = relevancy_score(vecs[0], vecs[0], vecs[1:])
        assert score == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), rel=1e-9)
        assert score == pytest.approx(0.731059, abs=1e-6)

    def test_canonical_equals_feat(self):
        vecs = orthonormal_rows(2, 8)
        score = relevancy_score(vecs[0], vecs[1], vecs[0][None])
        assert score == pytest.approx(1.0 / (1.0 + np.e), rel=1e-9)
        assert score == pytest.approx(0.268941, abs=1e-6)

    def test_empty_canonicals_rejected(self):
        with pytest.raises(UsageError):
            relevancy_score(np.ones(4), np.ones(4), np.zeros((0, 4)))

    def test_feat_scale_invariance(self):
        vecs = orthonormal_rows(3, 6, seed=1)
        feat = 0.3 * vecs[0] + 0.1 * vecs[1]
        a = relevancy_score(feat, vecs[1], vecs[2][None])
        b = relevancy_score(100.0 * feat, vecs[1], vecs[2][None])
        assert a == pytest.approx(b, rel=1e-12)

    def test_strictly_increasing_in_query_dot(self):
        # Fixed feature and canonicals; the query rotates toward the feature
        # direction so only the query dot changes.
        canon = orthonormal_rows(2, 8, seed=3)
        base = orthonormal_rows(3, 8, seed=4)
        feat = base[0]
        perp = base[1]
        scores = []
        for t in np.linspace(-1, 1, 21):
            q = t * feat + np.sqrt(max(1 - t * t, 0)) * perp
            scores.append(relevancy_score(feat, q, canon))
        assert np.all(np.diff(scores) > 0)


@given(st.floats(-0.99, 0.99), st.floats(-0.99, 0.99))
@settings(max_examples=60, deadline=None)
def test_relevancy_monotone_property(dot_a, dot_b):
    # Higher query affinity with fixed canonical dots never lowers the score.
    d = 8
    feat = np.zeros(d)
    feat[0] = 1.0
    canon = np.zeros((1, d))
    canon[0, 1] = 1.0
    qa = np.array([dot_a, 0.2] + [0.0] * (d - 2))
    qb = np.array([dot_b, 0.2] + [0.0] * (d - 2))
    sa = relevancy_score(feat, qa, canon)
    sb = relevancy_score(feat, qb, canon)
    if dot_a < dot_b:
        assert sa <= sb
    elif dot_a > dot_b:
        assert sa >= sb


def make_dictionary(n_classes=3, d=16, n_canon=4, seed=0):
    vecs = orthonormal_rows(n_classes + n_canon, d, seed=seed)
    entries = {f"class{i}": vecs[i] for i in range(n_classes)}
    return EmbeddingDictionary(entries=entries, canonical=vecs[n_classes:])


class TestQueryView:
    def _rendered(self, seed=0, k=4, size=16):
        field = random_field(20, k=k, seed=seed)
        return render(field, make_camera(size))

    def _identity_codecs(self, k, d, target):
        # Codec that maps any positive-feature pixel near `target`: zero
        # weights, bias = target, so every decode equals the target exactly.
        zero = np.zeros((d, k))
        return (MlpCodec(weights=[zero], biases=[target]),
                MlpCodec(weights=[zero], biases=[target.copy()]))

    def test_constant_decode_masks_everything(self):
        dictionary = make_dictionary()
        q = dictionary.entries["class0"]
        rendered = self._rendered()
        codecs = self._identity_codecs(4, 16, np.array(q))
        loss_mask = rendered.alpha > 0.2
        result = query_view(rendered, codecs, dictionary, "class0",
                            threshold=0.5, loss_mask=loss_mask)
        np.testing.assert_array_equal(result.mask, loss_mask)
        assert result.max_score == pytest.approx(0.731059, abs=1e-5)

    def test_threshold_one_empties_mask(self):
        dictionary = make_dictionary()
        rendered = self._rendered(seed=1)
        codecs = self._identity_codecs(4, 16, np.array(dictionary.entries["class0"]))
        result = query_view(rendered, codecs, dictionary, "class0",
                            threshold=1.0)
        assert not result.mask.any()

    def test_branch_selection_prefers_matching_branch(self):
        dictionary = make_dictionary()
        q = np.array(dictionary.entries["class0"])
        other = np.array(dictionary.entries["class1"])
        rendered = self._rendered(seed=2)
        zero = np.zeros((16, 4))
        codecs = (MlpCodec(weights=[zero], biases=[q]),
                  MlpCodec(weights=[zero], biases=[other]))
        result = query_view(rendered, codecs, dictionary, "class0")
        assert result.selected_branch == "region"
        flipped = query_view(rendered, (codecs[1], codecs[0]), dictionary, "class0")
        assert flipped.selected_branch == "context"

    def test_unknown_query_raises(self):
        dictionary = make_dictionary()
        rendered = self._rendered(seed=3)
        codecs = self._identity_codecs(4, 16, np.array(dictionary.entries["class0"]))
        with pytest.raises(KeyError):
            query_view(rendered, codecs, dictionary, "nope")

    def test_empty_loss_mask_flagged(self):
        dictionary = make_dictionary()
        rendered = self._rendered(seed=4)
        codecs = self._identity_codecs(4, 16, np.array(dictionary.entries["class0"]))
        result = query_view(rendered, codecs, dictionary, "class0",
                            loss_mask=np.zeros((16, 16), bool))
        assert result.empty and result.argmax_pixel is None
        assert not result.mask.any()

    def test_mask_monotone_in_threshold(self):
        dictionary = make_dictionary()
        rendered = self._rendered(seed=5)
        rng = np.random.default_rng(6)
        codecs = (MlpCodec.create(4, 16, seed=7), MlpCodec.create(4, 16, seed=8))
        prev = None
        for thr in (0.2, 0.4, 0.5, 0.7):
            result = query_view(rendered, codecs, dictionary, "class1",
                                threshold=thr)
            if prev is not None:
                assert np.all(prev | ~result.mask)  # mask shrinks
                assert result.mask.sum() <= prev.sum()
            prev = result.mask

    def test_argmax_row_major_on_ties(self):
        dictionary = make_dictionary()
        rendered = self._rendered(seed=9)
        codecs = self._identity_codecs(4, 16, np.array(dictionary.entries["class0"]))
        result = query_view(rendered, codecs, dictionary, "class0")
        # constant map: first pixel in row-major order wins
        assert result.argmax_pixel == (0, 0)


class TestSelectBranchStrategy:
    def setup_method(self):
        rng = np.random.default_rng(10)
        self.map_a = rng.uniform(0.1, 0.9, (8, 8))
        self.map_b = rng.uniform(0.1, 0.9, (8, 8))

    def test_identical_maps_any_strategy(self):
        for strategy in ("ours", "mean", "fixed_region", "fixed_context"):
            out, _ = select_branch_strategy(self.map_a, self.map_a, strategy)
            np.testing.assert_allclose(out, self.map_a)

    def test_ours_picks_higher_max(self):
        a = self.map_a.copy()
        b = self.map_b.copy()
        a[3, 3] = 0.9
        b[4, 4] = 0.6
        a[a > 0.9] = 0.5
        b[b > 0.6] = 0.5
        out, branch = select_branch_strategy(a, b, "ours")
        assert branch == "region"
        out, branch = select_branch_strategy(b, a, "ours")
        assert branch == "context"

    def test_mean_is_pixelwise_average(self):
        out, branch = select_branch_strategy(self.map_a, self.map_b, "mean")
        np.testing.assert_allclose(out, 0.5 * (self.map_a + self.map_b))
        assert branch == "mean"

    def test_upper_bound_needs_gt(self):
        with pytest.raises(UsageError):
            select_branch_strategy(self.map_a, self.map_b, "upper_bound")

    def test_upper_bound_dominates_fixed(self):
        from gsfield.evaluation import iou

        rng = np.random.default_rng(11)
        for seed in range(20):
            r = np.random.default_rng(seed)
            a = r.uniform(0, 1, (8, 8))
            b = r.uniform(0, 1, (8, 8))
            gt = r.uniform(0, 1, (8, 8)) > 0.6
            full = np.ones((8, 8), bool)
            out, _ = select_branch_strategy(a, b, "upper_bound", threshold=0.5,
                                            gt=gt)
            ub = iou(out >= 0.5, gt, full)
            ia = iou(a >= 0.5, gt, full)
            ib = iou(b >= 0.5, gt, full)
            assert ub >= max(ia, ib) - 1e-12

    def test_unknown_strategy(self):
        with pytest.raises(UsageError):
            select_branch_strategy(self.map_a, self.map_b, "nope")

    def test_random_pairs_ours_matches_max(self):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            a = rng.uniform(0, 1, (6, 6))
            b = rng.uniform(0, 1, (6, 6))
            if a.max() == b.max():
                continue
            _, branch = select_branch_strategy(a, b, "ours")
            expected = "region" if a.max() > b.max() else "context"
            assert branch == expected


class TestPcaVisualize:
    def test_constant_map_is_black(self):
        feats = np.ones((6, 6, 10))
        out = pca_visualize(feats)
        assert np.all(out == 0)

    def test_two_regions_two_colors(self):
        feats = np.zeros((6, 6, 10))
        feats[:, 3:, 0] = 2.0
        feats[:, :3, 1] = 1.0
        out = pca_visualize(feats)
        colors = {tuple(np.round(out[i, j], 6)) for i in range(6) for j in range(6)}
        assert len(colors) == 2

    def test_needs_three_pixels(self):
        with pytest.raises(UsageError):
            pca_visualize(np.zeros((2, 1, 4)))

    def test_unmasked_pixels_black(self):
        rng = np.random.default_rng(12)
        feats = rng.normal(size=(8, 8, 12))
        mask = np.zeros((8, 8), bool)
        mask[:4] = True
        out = pca_visualize(feats, mask)
        assert np.all(out[~mask] == 0)
        assert out[mask].max() == pytest.approx(1.0)

    def test_rotation_invariance_up_to_flips(self):
        rng = np.random.default_rng(13)
        feats = rng.normal(size=(10, 10, 6))
        base = pca_visualize(feats)
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        rotated = pca_visualize(feats @ q)
        for c in range(3):
            direct = np.abs(base[:, :, c] - rotated[:, :, c]).max()
            flipped = np.abs(base[:, :, c] - (1 - rotated[:, :, c])).max()
            # zero channels (rank padding) compare against either form
            assert min(direct, flipped) < 1e-6 or np.all(base[:, :, c] == 0)

    def test_output_range(self):
        rng = np.random.default_rng(14)
        out = pca_visualize(rng.normal(size=(12, 12, 20)))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestEmbeddingDictionary:
    def test_rejects_non_unit_entry(self):
        with pytest.raises(ShapeError):
            EmbeddingDictionary(entries={"a": np.full(4, 0.3)},
                                canonical=np.eye(4)[:1])

    def test_rejects_empty_canonical(self):
        with pytest.raises(UsageError):
            EmbeddingDictionary(entries={}, canonical=np.zeros((0, 4)))
