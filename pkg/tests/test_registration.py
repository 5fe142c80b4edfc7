import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mongerb.pde.fem import FemSpace
from mongerb.registration import (
    BoundaryProjector,
    ConvexityWarning,
    MongeEmbeddingSet,
    ProjectionConfig,
    TransportModes,
    bijectivity_report,
    build_inverse_map,
    build_transport_modes,
    convexity_defect,
    embedding_correlation,
    h1_boundary_projection,
    invert_map,
)
from mongerb.tensor_grid import GridDensity, GridField, make_uniform_grid

GRID = make_uniform_grid(2, 17)
UNIFORM = GridDensity(GRID, np.ones(GRID.shape))
Y1, Y2 = GRID.mesh()
SPEED = 0.2
TIMES = np.linspace(0.0, 0.8, 5)


def vertical_shift_embedding():
    """Potentials of the maps ``y -> y + SPEED * t * e_2``."""
    pots = np.array([(-SPEED * t * Y2).ravel() for t in TIMES])
    return MongeEmbeddingSet(UNIFORM, pots, TIMES)


class TestEmbedding:
    def test_shift_correlation(self):
        C = embedding_correlation(vertical_shift_embedding())
        np.testing.assert_allclose(C, SPEED**2 * np.outer(TIMES, TIMES), atol=1e-14)

    def test_shift_single_mode_is_minus_y(self):
        modes = build_transport_modes(vertical_shift_embedding(), 1e-6)
        assert modes.m == 1
        np.testing.assert_allclose(modes.modes[0], -(Y2 - 0.5).ravel(), atol=1e-12)
        # the training coefficients reproduce the potentials up to constants
        np.testing.assert_allclose(modes.coefficients[:, 0], SPEED * TIMES, atol=1e-12)

    def test_rejects_foreign_grid(self):
        with pytest.raises(ValueError):
            MongeEmbeddingSet(UNIFORM, np.zeros((1, 10)), [0.0])

    def test_all_constant_potentials_give_no_modes(self):
        emb = MongeEmbeddingSet(UNIFORM, np.ones((3, GRID.size)), [0, 1, 2])
        assert build_transport_modes(emb, 1e-3).m == 0

    @given(st.integers(0, 2**32 - 1))
    def test_modes_orthonormal_and_gauge_invariant(self, seed):
        rng = np.random.default_rng(seed)
        n_s = 6
        base = np.array([np.sin(np.pi * k * Y1) * np.cos(np.pi * (k % 3) * Y2) for k in range(1, 5)])
        pots = (rng.normal(size=(n_s, 4)) @ base.reshape(4, -1))
        emb = MongeEmbeddingSet(UNIFORM, pots, np.arange(n_s))
        modes = build_transport_modes(emb, 1e-12)
        wts = emb.gradient_weights()
        G = np.einsum("idn,jdn,n->ij", modes.gradients, modes.gradients, wts)
        np.testing.assert_allclose(G, np.eye(modes.m), atol=1e-6)
        anchored = modes.modes[:, int(np.ravel_multi_index(GRID.center_index(), GRID.shape))]
        np.testing.assert_array_equal(anchored, 0.0)
        # each potential is recovered up to a constant from its coefficients
        recon = modes.coefficients @ modes.modes
        diff = recon - pots
        np.testing.assert_allclose(diff - diff.mean(axis=1, keepdims=True), 0.0, atol=1e-8 * np.abs(pots).max())
        shifted = MongeEmbeddingSet(UNIFORM, pots + rng.normal(size=(n_s, 1)), np.arange(n_s))
        again = build_transport_modes(shifted, 1e-12)
        np.testing.assert_allclose(again.modes, modes.modes, atol=1e-9)


class TestProjection:
    def test_neumann_cosines_preserved(self):
        # the discrete boundary penalty is first order accurate
        errors = []
        for n in (33, 65, 129):
            grid = make_uniform_grid(2, n)
            x, y = grid.mesh()
            psi = GridField(grid, np.cos(np.pi * x) * np.cos(np.pi * y))
            out = h1_boundary_projection(psi, ProjectionConfig(0.05))
            errors.append(np.max(np.abs(out.values - psi.values)))
        rates = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
        assert np.all(rates > 1.0)
        assert errors[-1] < 5e-3

    def test_constant_preserved(self):
        psi = GridField(GRID, np.full(GRID.shape, 3.0))
        out = h1_boundary_projection(psi, ProjectionConfig.from_epsilon(1e-3))
        np.testing.assert_allclose(out.values, 3.0, atol=1e-10)

    def test_boundary_slope_reduced(self):
        grid = make_uniform_grid(2, 33)
        x, y = grid.mesh()
        psi = GridField(grid, x**2 + 0.3 * y)
        out = h1_boundary_projection(psi, ProjectionConfig.from_epsilon(1e-3)).values
        h = grid.spacing[1]
        slope_before = np.abs(psi.values[:, 1] - psi.values[:, 0]) / h
        slope_after = np.abs(out[:, 1] - out[:, 0]) / h
        assert slope_after.max() < 0.1 * slope_before.max()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ProjectionConfig(0.0)
        with pytest.raises(ValueError):
            ProjectionConfig(0.1, penalty=-1.0)

    def test_projector_accepts_dirichlet_space(self):
        proj = BoundaryProjector(FemSpace(GRID, dirichlet=True), ProjectionConfig(0.1))
        assert proj(np.ones(GRID.size)).shape == (GRID.size,)


def translation_modes(grid):
    """Modes ``-y_1`` and ``-y_2``: ``w`` translates by ``w``."""
    y1, y2 = grid.mesh()
    return TransportModes.from_modes(grid, np.array([-(y1 - 0.5).ravel(), -(y2 - 0.5).ravel()]))


class TestMaps:
    def test_zero_coefficients_identity(self):
        mapping = build_inverse_map(translation_modes(GRID), [0.0, 0.0])
        np.testing.assert_allclose(mapping.inverse.as_array(), np.stack(GRID.mesh()), atol=1e-15)
        np.testing.assert_allclose(mapping.det, 1.0)

    def test_translation(self):
        mapping = build_inverse_map(translation_modes(GRID), [0.1, -0.05])
        inv = mapping.inverse.as_array()
        np.testing.assert_allclose(inv[0], Y1 + 0.1, atol=1e-12)
        np.testing.assert_allclose(inv[1], Y2 - 0.05, atol=1e-12)
        np.testing.assert_allclose(mapping.det, 1.0, atol=1e-12)

    def test_wrong_coefficient_count(self):
        with pytest.raises(ValueError):
            build_inverse_map(translation_modes(GRID), [0.1])

    def test_invert_zero(self):
        mapping = invert_map(translation_modes(GRID), [0.0, 0.0])
        np.testing.assert_allclose(mapping.forward.as_array(), np.stack(GRID.mesh()), atol=1e-10)
        assert mapping.roundtrip_error < 1e-10

    def test_invert_translation_interior(self):
        grid = make_uniform_grid(2, 33)
        mapping = invert_map(translation_modes(grid), [0.05, 0.0])
        fwd = mapping.forward.as_array()
        x1, _ = grid.mesh()
        inner = (x1 > 0.2) & (x1 < 0.8)
        np.testing.assert_allclose(fwd[0][inner], x1[inner] - 0.05, atol=1e-8)

    def test_invert_smooth_bump_round_trip(self, rng):
        grid = make_uniform_grid(2, 33)
        y1, y2 = grid.mesh()
        bumps = np.array([(np.cos(np.pi * y1) / np.pi**2).ravel(), (np.cos(np.pi * y2) / np.pi**2).ravel()])
        modes = TransportModes.from_modes(grid, bumps)
        w = rng.uniform(-0.3, 0.3, size=2)
        with warnings.catch_warnings():
            warnings.simplefilter("error", ConvexityWarning)
            mapping = invert_map(modes, w)
        assert mapping.roundtrip_error <= 5 * grid.spacing[0]
        report = bijectivity_report(mapping)
        assert report.invertible
        # zero normal slope holds up to the one-sided gradient stencil error
        assert report.max_boundary_displacement < grid.spacing[0] ** 2

    def test_nonconvex_warns(self):
        modes = TransportModes.from_modes(GRID, (0.5 * (Y1**2 + Y2**2)).ravel())
        assert convexity_defect(modes, [2.0]) < 0
        with pytest.warns(ConvexityWarning):
            invert_map(modes, [2.0], polish=False)

    def test_small_coefficients_keep_det_near_one(self, rng):
        grid = make_uniform_grid(2, 33)
        y1, y2 = grid.mesh()
        modes = TransportModes.from_modes(grid, (np.cos(np.pi * y1) * np.cos(np.pi * y2)).ravel())
        dets = [build_inverse_map(modes, [s]).min_det for s in (1e-1, 1e-2, 1e-3)]
        gaps = np.abs(1 - np.array(dets))
        assert gaps[1] < 0.2 * gaps[0] and gaps[2] < 0.2 * gaps[1]

    def test_report_dict(self):
        report = bijectivity_report(build_inverse_map(translation_modes(GRID), [0.0, 0.0]))
        d = report.to_dict()
        assert d["invertible"] and d["min_det_forward"] is None
