import itertools

import numpy as np
import pytest

from afterunet.axial import attention_full3d, attention_inter, attention_intra, count_attention
from afterunet.bench import attention_memory, count_comparisons, format_reports, parse_grid, profile_model
from afterunet.errors import ConfigError
from afterunet.model import ModelConfig

GRIDS = list(itertools.product((1, 2, 4, 8, 16), (1, 2, 4, 8, 16), (1, 2, 4, 8)))


@pytest.mark.parametrize("grid", GRIDS, ids=lambda g: "x".join(map(str, g)))
def test_counters_match_closed_forms(grid):
    h, w, n = grid
    r = count_comparisons(grid)
    assert r.comparisons_per_query_full == h * w * n
    assert r.comparisons_per_query_factorized == h * w + n
    if h * w > 1 and n > 1:
        # hw*n - (hw + n) = (hw - 1)(n - 1) - 1, zero only at hw = n = 2
        if h * w == 2 and n == 2:
            assert r.reduction_ratio == 1
        else:
            assert r.reduction_ratio > 1


def test_headline_grid():
    r = count_comparisons((16, 16, 8), heads=2)
    assert (r.comparisons_per_query_full, r.comparisons_per_query_factorized) == (2048, 264)
    assert r.reduction_ratio == pytest.approx(2048 / 264)
    assert r.attention_map_elements_full == 2 * 2048 ** 2


def test_degenerate_grids():
    r = count_comparisons((4, 4, 1))
    assert (r.comparisons_per_query_full, r.comparisons_per_query_factorized) == (16, 17)
    r = count_comparisons((1, 1, 8))
    assert (r.comparisons_per_query_full, r.comparisons_per_query_factorized) == (8, 9)


def test_memory_closed_form():
    mem = attention_memory((16, 16, 8), 8, 4)
    assert mem["full"] == 134_217_728
    assert mem["factorized"] == 17_301_504
    assert mem["ratio"] == pytest.approx(7.7576, abs=1e-4)
    tiny = attention_memory((1, 1, 1), 8, 4)
    assert (tiny["full"], tiny["factorized"]) == (32, 64)


def test_memory_ratio_limit():
    for s in (8, 32, 128):
        grid = (s, s, 8)
        limit = (s * s * 8) / (s * s + 8)
        assert attention_memory(grid, 1)["ratio"] == pytest.approx(limit)


@pytest.mark.parametrize("grid", [(2, 3, 4), (4, 4, 2), (1, 5, 3)])
def test_materialized_maps_match_memory_formula(grid):
    h, w, n = grid
    heads, ch = 3, 2
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(heads, ch, h, w, n)) for _ in range(3))
    with count_attention() as full:
        attention_full3d(q, k, v)
    with count_attention() as fact:
        attention_inter(q, k, v)
        attention_intra(q, k, v)
    mem = attention_memory(grid, heads, 1)
    assert full.map_elements() == mem["full"]
    assert fact.map_elements() == mem["factorized"]


def test_peak_measurement_orders_correctly():
    r = count_comparisons((8, 8, 8), measure_peak=True)
    assert r.peak_bytes_full > r.peak_bytes_factorized > 0
    assert "peak_bytes_full=" in r.to_kv()


def test_kv_and_table_output():
    r = count_comparisons((16, 16, 8))
    kv = dict(line.split("=") for line in r.to_kv().splitlines())
    assert kv["grid"] == "16x16x8"
    assert int(kv["comparisons_per_query_full"]) == 2048
    assert int(kv["comparisons_per_query_factorized"]) == 264
    lines = format_reports([r, count_comparisons((2, 2, 2))]).splitlines()
    assert len({len(line) for line in lines}) == 1  # aligned
    assert "2048" in lines[2] and "264" in lines[2]


def test_parse_grid():
    assert parse_grid("16x16x8") == (16, 16, 8)
    for bad in ("16x16", "0x4x4", "axbxc"):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def _cfg(**kw):
    base = dict(channels=(8, 16, 32), num_classes=3, image_size=(64, 64), n_a=4, heads=4, layers=2)
    return ModelConfig(**{**base, **kw})


def _rows(cfg):
    return dict(profile_model(cfg)[0])


def test_profile_transformer_linear_in_layers():
    t2, t4 = _rows(_cfg(layers=2)), _rows(_cfg(layers=4))
    per_block = t2["transformer.blocks.0"]
    assert t4["transformer.blocks.3"] == per_block
    assert t4["transformer"] - t2["transformer"] == 2 * per_block
    assert t2["transformer"] == t2["transformer.pos"] + 2 * per_block


def test_profile_heads_do_not_change_counts():
    assert _rows(_cfg(heads=4))["transformer"] == _rows(_cfg(heads=8))["transformer"]


def test_profile_encoder_dominates_at_unet_widths():
    rows = _rows(ModelConfig(channels=(64, 128, 256, 512), image_size=(32, 32), n_a=2, heads=8, layers=1))
    assert rows["encoder"] > rows["transformer"] and rows["encoder"] > rows["decoder"]
    assert rows["total"] == rows["encoder"] + rows["transformer"] + rows["decoder"]


def test_profile_text_lists_modules():
    text = profile_model(_cfg())[1]
    for name in ("encoder", "transformer", "decoder", "total", "attention maps"):
        assert name in text
