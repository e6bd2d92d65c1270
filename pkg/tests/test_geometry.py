import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from satdino.exceptions import ConfigurationError
from satdino.geometry import (
    REFERENCE_VARIABLE_SIZES,
    AspectRange,
    ScaleRange,
    ViewSpecConfig,
    default_variable_sizes,
    effective_gsd,
    sample_crop,
    sample_view_windows,
    uniform_subranges,
)


def test_forced_quarter_crop():
    win = sample_crop(224, 224, ScaleRange(0.25, 0.25), AspectRange(1, 1), 96, 0.5,
                      np.random.default_rng(0))
    assert (win.w, win.h) == (112, 112)
    assert win.effective_gsd == pytest.approx(0.5 * 112 / 96, abs=1e-12)


def test_full_image_crop_is_identity():
    win = sample_crop(224, 224, ScaleRange(1, 1), AspectRange(1, 1), 224, 0.5,
                      np.random.default_rng(3))
    assert (win.x, win.y, win.w, win.h) == (0, 0, 224, 224)
    assert win.effective_gsd == 0.5


def test_area_fraction_statistics():
    rng = np.random.default_rng(11)
    scale = ScaleRange(0.05, 0.25)
    fr = np.array([
        sample_crop(224, 224, scale, AspectRange(3 / 4, 4 / 3), 96, 1.0, rng).area_fraction(224, 224)
        for _ in range(10_000)
    ])
    assert fr.min() >= 0.05 and fr.max() <= 0.25
    sigma = scale.width / math.sqrt(12)
    assert abs(fr.mean() - 0.15) <= 3 * sigma / math.sqrt(len(fr))


def test_infeasible_geometry_falls_back_to_centered_crop():
    # a 1:4 aspect cannot fit an 8x8 image at 90% area
    win = sample_crop(8, 8, ScaleRange(0.9, 1.0), AspectRange(4, 4), 8, 1.0,
                      np.random.default_rng(0))
    assert 0 <= win.x and win.x + win.w <= 8 and 0 <= win.y and win.y + win.h <= 8
    assert win.w / win.h <= 4


@pytest.mark.parametrize("lo,hi", [(0.0, 0.5), (0.6, 0.5), (0.1, 1.2)])
def test_invalid_scale_range(lo, hi):
    with pytest.raises(ConfigurationError):
        ScaleRange(lo, hi)


def test_invalid_aspect_range():
    with pytest.raises(ConfigurationError):
        AspectRange(2, 1)


def test_uniform_subranges_examples():
    parts = uniform_subranges(ScaleRange(0.05, 0.25), 8)
    assert [p.lo for p in parts] == pytest.approx([0.05 + 0.025 * i for i in range(8)], abs=1e-15)
    assert parts[-1].hi == 0.25
    assert uniform_subranges(ScaleRange(0.05, 0.25), 1) == [ScaleRange(0.05, 0.25)]
    wide = uniform_subranges(ScaleRange(0.05, 1.0), 8)
    assert all(p.width == pytest.approx(0.11875, abs=1e-12) for p in wide)
    assert (wide[0].lo, wide[-1].hi) == (0.05, 1.0)


def test_uniform_subranges_rejects_zero():
    with pytest.raises(ConfigurationError):
        uniform_subranges(ScaleRange(0.05, 0.25), 0)


@given(lo=st.floats(0.001, 0.9), width=st.floats(0.001, 0.099), n=st.integers(1, 64))
def test_subranges_partition(lo, width, n):
    scale = ScaleRange(lo, min(1.0, lo + width))
    parts = uniform_subranges(scale, n)
    assert parts[0].lo == scale.lo and parts[-1].hi == scale.hi
    for a, b in zip(parts, parts[1:]):
        assert a.hi == b.lo
        assert a.lo <= a.hi
    assert sum(p.width for p in parts) == pytest.approx(scale.width, abs=1e-12)


def test_default_view_windows():
    wins = sample_view_windows(224, 224, 0.5, ViewSpecConfig(), np.random.default_rng(0))
    assert len(wins) == 10
    assert [w.out_size for w in wins] == [224] * 2 + [96] * 8


def test_uniform_strategy_assigns_subranges():
    cfg = ViewSpecConfig(n_local=6, strategy="uniform")
    rng = np.random.default_rng(5)
    for _ in range(200):
        wins = sample_view_windows(224, 224, 1.0, cfg, rng)
        a2 = wins[2].area_fraction(224, 224)
        a7 = wins[7].area_fraction(224, 224)
        assert 0.05 <= a2 <= 0.05 + 0.2 / 6
        assert 0.05 + 5 * 0.2 / 6 <= a7 <= 0.25
        assert a2 <= a7


def test_variable_size_reference_sizes():
    assert default_variable_sizes(6) == REFERENCE_VARIABLE_SIZES
    assert default_variable_sizes(4) == (192, 176, 144, 128)
    cfg = ViewSpecConfig(n_local=6, strategy="variable-size", variable_sizes=default_variable_sizes(6))
    wins = sample_view_windows(224, 224, 1.0, cfg, np.random.default_rng(0))
    assert tuple(w.out_size for w in wins[2:]) == (192, 176, 144, 128, 112, 96)


def test_variable_size_scaled_to_patch_multiple():
    sizes = default_variable_sizes(6, local_out=32, multiple=8)
    assert all(s % 8 == 0 for s in sizes)
    assert sizes[-1] == 32


def test_variable_size_length_checked():
    with pytest.raises(ConfigurationError):
        ViewSpecConfig(n_local=4, strategy="variable-size", variable_sizes=(96,))


def test_unknown_strategy():
    with pytest.raises(ConfigurationError):
        ViewSpecConfig(strategy="spiral")


def test_effective_gsd_examples():
    assert effective_gsd(0.5, 112, 112, 96) == pytest.approx(0.583333333333, abs=1e-12)
    assert effective_gsd(1.705, 50, 50, 96) == pytest.approx(0.88802083333, abs=1e-10)
    for g, s in [(0.3, 7), (1.2, 96), (9.9, 224)]:
        assert effective_gsd(g, s, s, s) == pytest.approx(g, abs=1e-15)


@pytest.mark.parametrize("args", [(0, 1, 1, 1), (1, 0, 1, 1), (1, 1, -1, 1), (1, 1, 1, 0)])
def test_effective_gsd_domain(args):
    with pytest.raises(ValueError):
        effective_gsd(*args)


@settings(max_examples=200, deadline=None)
@given(src_w=st.integers(8, 300), src_h=st.integers(8, 300), seed=st.integers(0, 2**32 - 1),
       strategy=st.sampled_from(["random", "uniform"]), n_local=st.integers(0, 12))
def test_windows_inside_source(src_w, src_h, seed, strategy, n_local):
    cfg = ViewSpecConfig(n_local=n_local, strategy=strategy)
    wins = sample_view_windows(src_w, src_h, 0.7, cfg, np.random.default_rng(seed))
    for w in wins:
        assert w.w >= 1 and w.h >= 1
        assert 0 <= w.x and w.x + w.w <= src_w
        assert 0 <= w.y and w.y + w.h <= src_h
        assert w.effective_gsd == pytest.approx(0.7 * math.sqrt(w.w * w.h) / w.out_size, rel=1e-12)


def test_windows_deterministic():
    cfg = ViewSpecConfig(strategy="uniform")
    a = sample_view_windows(200, 150, 0.5, cfg, np.random.default_rng(42))
    b = sample_view_windows(200, 150, 0.5, cfg, np.random.default_rng(42))
    assert a == b
