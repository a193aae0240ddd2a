import numpy as np
import pytest

from switchdit.datasets import SHAPES3_CLASSES, gen_dataset, random_hflip
from switchdit.errors import ConfigError


@pytest.mark.parametrize("name", ["blobs", "rings", "shapes3", "twomode"])
def test_deterministic_and_bounded(name):
    a = gen_dataset(name, 30, seed=5, image_size=8)
    b = gen_dataset(name, 30, seed=5, image_size=8)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == (30, 1, 8, 8)
    assert a.images.min() >= -1.0 and a.images.max() <= 1.0
    assert len(a) == 30


def test_seed_changes_images():
    a = gen_dataset("blobs", 10, seed=0).images
    b = gen_dataset("blobs", 10, seed=1).images
    assert not np.array_equal(a, b)


def test_shapes3_labels_balanced():
    data = gen_dataset("shapes3", 30, seed=0, image_size=16)
    assert data.num_classes == len(SHAPES3_CLASSES)
    np.testing.assert_array_equal(np.bincount(data.labels), [10, 10, 10])
    assert set(np.unique(data.images)) == {-1.0, 1.0}


def test_unlabelled_sets():
    data = gen_dataset("rings", 4, seed=0)
    assert data.labels is None
    assert data.num_classes == 0


def test_twomode_values():
    images = gen_dataset("twomode", 40, seed=2, image_size=4).images
    means = images.reshape(40, -1).mean(axis=1)
    assert sorted(set(means.tolist())) == [-0.5, 0.5]
    assert np.sum(means > 0) == 20


def test_channels_repeat():
    images = gen_dataset("blobs", 3, seed=0, image_size=8, channels=3).images
    assert images.shape == (3, 3, 8, 8)
    np.testing.assert_array_equal(images[:, 0], images[:, 2])


def test_invalid_requests():
    with pytest.raises(ConfigError):
        gen_dataset("mnist", 10, seed=0)
    with pytest.raises(ConfigError):
        gen_dataset("blobs", 0, seed=0)


def test_random_hflip(rng):
    images = rng.normal(size=(50, 1, 4, 4))
    flipped = random_hflip(images, rng)
    mirrored = [np.array_equal(f, x[..., ::-1]) for f, x in zip(flipped, images)]
    kept = [np.array_equal(f, x) for f, x in zip(flipped, images)]
    assert all(m or k for m, k in zip(mirrored, kept))
    assert 0 < sum(mirrored) < 50
