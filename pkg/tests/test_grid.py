import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from weakkam import GridFunction, PeriodicGrid, mollifier_kernel, mollify
from weakkam.grid import gradient_centered, interpolate, kink_mask, lipschitz_constant, one_sided_differences


def sawtooth(grid, lip=2.0):
    # periodic tent with slopes +-lip, kinks at 0 and 1/2
    return GridFunction.from_callable(grid, lambda x: lip * np.abs(np.mod(x[..., 0], 1.0) - 0.5))


def test_grid_validation():
    with pytest.raises(ValueError):
        PeriodicGrid(1, 4)
    with pytest.raises(ValueError):
        PeriodicGrid(3, 16)
    g = PeriodicGrid(2, 16)
    assert g.h * g.n == 1.0 and g.shape == (16, 16) and g.size == 256
    assert g.wrap_index((17, -1)) == (1, 15)


def test_grid_function_rejects_non_finite():
    with pytest.raises(ValueError):
        GridFunction(PeriodicGrid(1, 8), np.array([0, 1, np.nan, 0, 0, 0, 0, 0.0]))


def test_interpolate_constant():
    f = GridFunction.constant(PeriodicGrid(2, 8), 3.25)
    assert np.allclose(interpolate(f, np.random.default_rng(0).uniform(-2, 2, (20, 2))), 3.25, rtol=0, atol=1e-15)


def test_interpolate_linear_segment():
    # (0, 1, 0, -1) on four nodes read at 1/8; the same profile on eight nodes
    # (the grid requires n >= 8) puts the midpoint of the first segment at 1/16
    f = GridFunction(PeriodicGrid(1, 8), np.array([0, 1, 0, -1, 0, 1, 0, -1.0]))
    assert interpolate(f, 0.0625) == pytest.approx(0.5, abs=1e-15)
    assert interpolate(f, 1.0625) == pytest.approx(0.5, abs=1e-15)


def test_interpolate_sine():
    f = GridFunction.from_callable(PeriodicGrid(1, 256), lambda x: np.sin(2 * np.pi * x[..., 0]))
    assert abs(interpolate(f, 0.3) - np.sin(0.6 * np.pi)) < 1e-3


def test_interpolate_reproduces_nodes():
    g = PeriodicGrid(2, 12)
    f = GridFunction(g, np.random.default_rng(1).normal(size=g.shape))
    assert np.array_equal(interpolate(f, g.coords().reshape(-1, 2)), f.values.reshape(-1))


def test_gradient_constant_is_zero():
    assert np.all(gradient_centered(GridFunction.constant(PeriodicGrid(2, 8), 1.0)) == 0.0)


def test_gradient_sine():
    g = PeriodicGrid(1, 256)
    f = GridFunction.from_callable(g, lambda x: np.sin(2 * np.pi * x[..., 0]))
    exact = 2 * np.pi * np.cos(2 * np.pi * g.coords()[..., 0])
    assert np.max(np.abs(gradient_centered(f)[..., 0] - exact)) < 1e-3


def test_gradient_sawtooth_bounded_away_from_kinks():
    g = PeriodicGrid(1, 64)
    f = sawtooth(g, 2.0)
    grad = gradient_centered(f)[..., 0]
    assert np.all(np.abs(grad) <= 2.0 + 1e-12)
    mask = kink_mask(f)
    assert mask[0] and mask[32] and mask.sum() == 6
    assert np.allclose(np.abs(grad[~mask]), 2.0)


def test_lipschitz_constant():
    assert lipschitz_constant(sawtooth(PeriodicGrid(1, 64), 2.0)) == pytest.approx(2.0)


def test_kernel_properties():
    for g, delta in ((PeriodicGrid(1, 256), 0.05), (PeriodicGrid(2, 64), 0.1)):
        k = mollifier_kernel(delta, g)
        assert np.all(k.weights >= 0)
        assert abs(k.weights.sum() - 1.0) < 1e-12
        assert np.all(np.linalg.norm(k.offsets * g.h, axis=1) < delta)


def test_kernel_under_one_cell():
    with pytest.raises(ValueError):
        mollifier_kernel(0.5 / 64, PeriodicGrid(1, 64))


def test_mollify_constant():
    g = PeriodicGrid(2, 16)
    out = mollify(GridFunction.constant(g, 2.5), mollifier_kernel(0.15, g))
    assert np.allclose(out.values, 2.5, atol=1e-14)


def test_mollify_sawtooth_distance():
    g = PeriodicGrid(1, 1024)
    f = sawtooth(g, 2.0)
    out = mollify(f, mollifier_kernel(0.01, g))
    assert np.max(np.abs(out.values - f.values)) <= 0.02
    assert out.sup_norm() <= f.sup_norm()


def test_mollify_support_limit():
    g = PeriodicGrid(1, 64)
    with pytest.raises(ValueError):
        mollify(GridFunction.constant(g), mollifier_kernel(0.3, g))


def test_mollified_gradient_in_interval_hull():
    g = PeriodicGrid(1, 256)
    rng = np.random.default_rng(3)
    f = GridFunction(g, np.cumsum(rng.uniform(-1, 1, g.n)) * g.h)
    f = GridFunction(g, f.values - np.linspace(0, f.values[-1], g.n))  # roughly periodic
    k = mollifier_kernel(0.03, g)
    grad = gradient_centered(mollify(f, k))[..., 0]
    fwd, _ = one_sided_differences(f)
    r = k.radius_cells
    windows = np.stack([np.roll(fwd[..., 0], j) for j in range(-r, r + 2)])
    assert np.all(grad >= windows.min(axis=0) - 1e-9)
    assert np.all(grad <= windows.max(axis=0) + 1e-9)


def test_csv_json_roundtrip(tmp_path):
    for g in (PeriodicGrid(1, 16), PeriodicGrid(2, 8)):
        f = GridFunction(g, np.random.default_rng(2).normal(size=g.shape) / 3.0)
        assert GridFunction.from_json(f.to_json()) == f
        path = tmp_path / f"f{g.dim}.csv"
        f.to_csv(path)
        again = GridFunction.from_csv(path)
        assert np.array_equal(again.values, f.values)


def test_normalized():
    f = GridFunction(PeriodicGrid(1, 8), np.arange(8.0))
    assert f.normalized(3).values[3] == 0.0


values_32 = arrays(np.float64, 32, elements=st.floats(-10, 10))


@settings(max_examples=60, deadline=None)
@given(values_32, values_32, st.floats(-5, 5))
def test_mollify_linear_and_monotone(a, b, k):
    g = PeriodicGrid(1, 32)
    kern = mollifier_kernel(0.1, g)
    f, h = GridFunction(g, a), GridFunction(g, b)
    lo = GridFunction(g, np.minimum(a, b))
    assert np.all(mollify(lo, kern).values <= mollify(f, kern).values + 1e-12)
    shifted = mollify(GridFunction(g, a + k), kern).values
    assert np.allclose(shifted, mollify(f, kern).values + k, atol=1e-10)
    both = mollify(GridFunction(g, a + b), kern).values
    assert np.allclose(both, mollify(f, kern).values + mollify(h, kern).values, atol=1e-10)
