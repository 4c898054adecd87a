import time

import pytest

from metaformer.accounting import conv_flops, count_flops, count_macs, count_params, count_table, flop_breakdown
from metaformer.model import preset

# published values (millions of parameters, GFLOPs)
PARAMS = {"metaformer-0": 28e6, "metaformer-1": 45e6, "metaformer-2": 81e6}
FLOPS_224 = {"metaformer-0": 4.6e9, "metaformer-1": 8.5e9, "metaformer-2": 16.9e9}
FLOPS_384 = {"metaformer-0": 13.4e9, "metaformer-1": 24.7e9, "metaformer-2": 49.7e9}


@pytest.mark.parametrize("name", sorted(PARAMS))
def test_param_counts_within_3_percent(name):
    n = count_params(preset(name), 224)
    assert abs(n - PARAMS[name]) / PARAMS[name] <= 0.03


def test_conv1x1_flops_hand_formula():
    assert conv_flops(7, 5, 12, 20, 1) == 2 * 7 * 5 * 12 * 20
    assert conv_flops(4, 4, 8, 8, 3, groups=8) == 2 * 4 * 4 * 9 * 8


def test_flops_are_twice_macs():
    cfg = preset("metaformer-0")
    assert count_flops(cfg, 224) == 2 * count_macs(cfg, 224)
    assert count_flops(cfg, 224) == sum(flop_breakdown(cfg, 224).values())


@pytest.mark.parametrize("name", sorted(PARAMS))
def test_macs_track_published_flops(name):
    # the published column lines up with multiply-accumulates; see the notes on the counting convention
    cfg = preset(name)
    assert abs(count_macs(cfg, 224) - FLOPS_224[name]) / FLOPS_224[name] <= 0.15
    assert abs(count_macs(cfg, 384) - FLOPS_384[name]) / FLOPS_384[name] <= 0.15


def test_flops_grow_with_resolution():
    cfg = preset("metaformer-0")
    assert count_flops(cfg, 384) > 2.5 * count_flops(cfg, 224)


def test_count_table_is_fast():
    t0 = time.perf_counter()
    rows = [r for n in PARAMS for r in count_table(preset(n))]
    assert time.perf_counter() - t0 < 1.0
    assert [r.image_size for r in rows[:2]] == [224, 384]
