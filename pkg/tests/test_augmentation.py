"""
Tests for contrastive view generation
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

sys.path.append(str(Path(__file__).parent.parent))

from processing.augmentation import AugmentPolicy, augment_view, make_contrastive_views
from utils.exceptions import ConfigError

DEGENERATE = AugmentPolicy(
    crop_scale=(1.0, 1.0),
    hflip_prob=0.0,
    rotation_deg=(0.0, 0.0),
    brightness_jitter=0.0,
    contrast_jitter=0.0,
)


def _patch(size=64, seed=0):
    return np.random.default_rng(seed).standard_normal((size, size)).astype(np.float32)


class TestAugmentView:
    def test_disabled_policy_is_identity(self):
        patch = _patch()
        view = augment_view(patch, AugmentPolicy.identity(), np.random.default_rng(0))
        np.testing.assert_array_equal(view, patch)

    def test_degenerate_ranges_are_identity(self):
        patch = _patch()
        view = augment_view(patch, DEGENERATE, np.random.default_rng(0))
        np.testing.assert_array_equal(view, patch)

    def test_same_stream_same_view(self):
        patch, policy = _patch(), AugmentPolicy()
        a = augment_view(patch, policy, np.random.default_rng(9))
        b = augment_view(patch, policy, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_shape_and_finiteness(self):
        patch, policy = _patch(48), AugmentPolicy()
        rng = np.random.default_rng(1)
        for _ in range(20):
            view = augment_view(patch, policy, rng)
            assert view.shape == (48, 48)
            assert view.dtype == np.float32
            assert np.isfinite(view).all()

    def test_input_is_not_modified(self):
        patch = _patch()
        before = patch.copy()
        augment_view(patch, AugmentPolicy(), np.random.default_rng(2))
        np.testing.assert_array_equal(patch, before)

    def test_rejects_non_square(self):
        patch = np.zeros((4, 5), dtype=np.float32)
        with pytest.raises(ConfigError):
            augment_view(patch, AugmentPolicy(), np.random.default_rng(0))

    def test_reversed_ranges_rejected(self):
        with pytest.raises(ValidationError):
            AugmentPolicy(rotation_deg=(10.0, -10.0))
        with pytest.raises(ValidationError):
            AugmentPolicy(crop_scale=(0.0, 1.0))


class TestContrastiveViews:
    def test_three_views_one_group(self):
        rng = np.random.default_rng(0)
        views = make_contrastive_views(_patch(), 3, AugmentPolicy(), rng, group_id=7)
        assert len(views.views) == 3
        assert views.group_id == 7

    def test_disabled_policy_views_identical(self):
        rng = np.random.default_rng(0)
        views = make_contrastive_views(_patch(), 2, AugmentPolicy.identity(), rng)
        np.testing.assert_array_equal(views.views[0], views.views[1])

    def test_views_differ(self):
        rng = np.random.default_rng(3)
        patch = _patch()
        for _ in range(100):
            a, b = make_contrastive_views(patch, 2, AugmentPolicy(), rng).views
            assert not np.array_equal(a, b)

    def test_fewer_than_two_views(self):
        with pytest.raises(ConfigError):
            make_contrastive_views(
                _patch(), 1, AugmentPolicy(), np.random.default_rng(0)
            )
