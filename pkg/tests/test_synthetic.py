import math

import numpy as np
import pytest

from metaformer.errors import ConfigError
from metaformer.meta import MetaSchema
from metaformer.synthetic import (RADIUS_95, SyntheticWorld, SyntheticWorldSpec, _angular_distance,
                                  generate_synthetic, nearest_cluster_predict, pair_of, read_mfds, write_mfds)

SPEC = SyntheticWorldSpec(num_classes=8, num_pairs=4, num_train=400, num_test=200, seed=0)


@pytest.fixture(scope="module")
def world_data():
    return generate_synthetic(SPEC, SPEC.schema(("geo", "datetime", "attribute", "text")))


def test_same_seed_byte_identical_files(tmp_path, world_data):
    _, train, _ = world_data
    _, again, _ = generate_synthetic(SPEC, SPEC.schema(("geo", "datetime", "attribute", "text")))
    write_mfds(tmp_path / "a.mfds", train)
    write_mfds(tmp_path / "b.mfds", again)
    assert (tmp_path / "a.mfds").read_bytes() == (tmp_path / "b.mfds").read_bytes()


def test_mfds_round_trip(tmp_path, world_data):
    _, train, _ = world_data
    sub = train.subset(np.arange(10))
    sub.records[3] = type(sub.records[3])()  # a record with every channel absent
    write_mfds(tmp_path / "s.mfds", sub)
    back = read_mfds(tmp_path / "s.mfds")
    assert np.array_equal(back.images, sub.images) and np.array_equal(back.labels, sub.labels)
    assert back.schema == sub.schema and back.num_classes == sub.num_classes
    for a, b in zip(back.records, sub.records):
        assert a.geo == b.geo and a.datetime == b.datetime and a.text == b.text
        assert (a.attributes is None) == (b.attributes is None)
    assert back.records[3].geo is None


def test_pairs_share_visual_pattern():
    # identical image distributions make image-only Bayes accuracy on a pair exactly 1/2
    world = SyntheticWorld(SPEC)
    for c in range(0, 2 * SPEC.num_pairs, 2):
        a, b = world.classes[c], world.classes[c + 1]
        assert np.array_equal(a.colour, b.colour) and a.angle == b.angle and a.frequency == b.frequency
        ra, rb = np.random.default_rng(9), np.random.default_rng(9)
        assert np.array_equal(world.sample_image(c, ra), world.sample_image(c + 1, rb))
    assert pair_of(SPEC, 5) == 4 and pair_of(SyntheticWorldSpec(num_pairs=1), 5) is None


def test_pairs_differ_in_every_meta_channel():
    world = SyntheticWorld(SPEC)
    for c in range(0, 2 * SPEC.num_pairs, 2):
        a, b = world.classes[c], world.classes[c + 1]
        assert _angular_distance(a.lat, a.lon, b.lat, b.lon) >= SPEC.min_separation
        assert (a.peak_month - b.peak_month) % 12 == 6
        assert (a.peak_hour - b.peak_hour) % 24 == 12
        assert np.all(a.attributes + b.attributes == 1.0)
        assert not set(a.words) & set(b.words)


def test_nearest_cluster_oracle_separates_pairs(world_data):
    world, _, test = world_data
    pred = nearest_cluster_predict(world, test.records)
    confusable = test.labels < 2 * SPEC.num_pairs
    assert (pred[confusable] == test.labels[confusable]).mean() > 0.95


def test_cluster_95_region_monte_carlo():
    spec = SyntheticWorldSpec(num_classes=2, num_pairs=1, geo_sigma=4.0, seed=2)
    world = SyntheticWorld(spec)
    rng = np.random.default_rng(0)
    n = 4000
    inside = np.mean([world.in_cluster_95(0, *world.sample_location(0, rng)) for _ in range(n)])
    assert abs(inside - 0.95) < 3 * math.sqrt(0.95 * 0.05 / n) + 0.01
    assert RADIUS_95 == pytest.approx(math.sqrt(-2 * math.log(0.05)))


def test_class_counts_follow_weights():
    spec = SyntheticWorldSpec(num_classes=3, num_pairs=1, widespread=1, widespread_weight=4.0, num_train=600)
    _, train, _ = generate_synthetic(spec, MetaSchema())
    assert np.bincount(train.labels).tolist() == [100, 100, 400]


def test_value_ranges(world_data):
    _, train, _ = world_data
    for r in train.records:
        assert -90 <= r.geo[0] <= 90 and -180 <= r.geo[1] <= 180
        assert 1 <= r.datetime[0] <= 12 and 0 <= r.datetime[1] < 24
        assert all(0 <= w < SPEC.vocab for s in r.text for w in s)
    assert train.images.dtype == np.float32


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticWorldSpec(num_classes=3, num_pairs=2)
    with pytest.raises(ConfigError):
        SyntheticWorldSpec(season_width=3)
    with pytest.raises(ConfigError):
        SyntheticWorld(SyntheticWorldSpec(num_classes=40, min_separation=80))
