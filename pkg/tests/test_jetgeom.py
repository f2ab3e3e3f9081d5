import math
import warnings

import numpy as np
import pytest

import support
from jetkcc import exprlang as ex
from jetkcc.exprlang import Bindings, parse
from jetkcc.jetgeom import (
    DegenerateMetricError,
    DTensorValue,
    JetPoint,
    MetricField,
    PdeSystem,
    Slot,
    batch_bindings,
    build_affine_system,
    build_first_order_system,
    canonical_spatial_connection,
    canonical_spatial_semispray,
    canonical_temporal_connection,
    canonical_temporal_semispray,
    canonical_tensors,
    christoffel_sym,
    curvature_sym,
    sample_jet_points,
)


# ---------------------------------------------------------------------------
# points
# ---------------------------------------------------------------------------


def test_jet_point_shapes_and_immutability():
    p = JetPoint([0.1, 0.2], [1.0], [[3.0, 4.0]])
    assert p.m == 2 and p.n == 1
    with pytest.raises(ValueError):
        p.t[0] = 9.0
    with pytest.raises(ValueError):
        JetPoint([0.1], [1.0], [[3.0, 4.0]])  # v must be (n, m)


def test_point_bindings_round_trip():
    p = JetPoint([0.5], [1.0, 2.0], [[3.0], [4.0]])
    b = p.bindings()
    assert ex.evaluate(parse("t1 + x2 + v2_1", 1, 2), b) == pytest.approx(6.5)


def test_sample_jet_points_deterministic():
    a = sample_jet_points(2, 2, 3, seed=5)
    b = sample_jet_points(2, 2, 3, seed=5)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.t, pb.t)
        assert np.array_equal(pa.v, pb.v)


def test_batch_bindings_matches_per_point():
    pts = sample_jet_points(2, 2, 7, seed=9)
    e = parse("sin(t1)*x2 + v1_2^2 - t2*v2_1", 2, 2)
    arr = ex.evaluate(e, batch_bindings(pts))
    for k, p in enumerate(pts):
        assert arr[k] == pytest.approx(ex.evaluate(e, p.bindings()), rel=1e-14)


# ---------------------------------------------------------------------------
# metric validation and evaluation
# ---------------------------------------------------------------------------


def test_metric_requires_structural_symmetry():
    with pytest.raises(ValueError, match="symmetric"):
        MetricField.temporal(((ex.ONE, ex.t_var(1)), (ex.ZERO, ex.ONE)))


def test_metric_rejects_foreign_variables():
    with pytest.raises(ValueError, match="uses variable"):
        MetricField.temporal(((ex.x_var(1),),))
    with pytest.raises(ValueError, match="uses variable"):
        MetricField.spatial(((ex.t_var(1),),))


def test_metric_rejects_out_of_dimension_indices():
    with pytest.raises(ValueError, match="exceeds dimension"):
        MetricField.temporal(((ex.t_var(2),),))


def test_metric_degeneracy_detected():
    g = MetricField.temporal(((ex.t_var(1), ex.ZERO), (ex.ZERO, ex.ONE)))
    g.evaluate([2.0, 0.0])
    with pytest.raises(DegenerateMetricError):
        g.evaluate([0.0, 0.0])


def test_metric_inverse_identity_and_diagonal():
    ident = support.flat_metric(ex.TEMPORAL, 3)
    inv = ident.inverse()
    assert np.allclose(inv.evaluate([0.3, -0.4, 2.0]), np.eye(3))

    g = MetricField.temporal(
        ((ex.ONE, ex.ZERO), (ex.ZERO, ex.pow_(ex.t_var(1), 2.0)))
    )
    ginv = g.inverse()
    for t1 in (0.5, 1.7, -2.0):
        assert np.allclose(
            ginv.evaluate([t1, 0.0]), np.diag([1.0, 1.0 / t1**2]), rtol=1e-12
        )


def test_metric_inverse_random_spd_against_numpy():
    g = support.random_spd_metric(ex.SPATIAL, 3, seed=13)
    ginv = g.inverse()
    rng = np.random.default_rng(14)
    for _ in range(50):
        z = rng.uniform(-1.5, 1.5, size=3)
        want = np.linalg.inv(g.evaluate(z))
        got = ginv.evaluate(z)
        assert support.rel_max(got, want) < 1e-10


def test_metric_inverse_dim4():
    g = support.random_spd_metric(ex.TEMPORAL, 4, seed=21)
    ginv = g.inverse()
    rng = np.random.default_rng(22)
    for _ in range(10):
        z = rng.uniform(-1, 1, size=4)
        assert support.rel_max(ginv.evaluate(z), np.linalg.inv(g.evaluate(z))) < 1e-10


# ---------------------------------------------------------------------------
# Christoffel symbols
# ---------------------------------------------------------------------------


def test_christoffel_constant_metric_structurally_zero():
    g = support.flat_metric(ex.SPATIAL, 3)
    gam = christoffel_sym(g)
    for plane in gam:
        for row in plane:
            for entry in row:
                assert ex.is_zero(entry)


def test_christoffel_exponential_time_metric():
    # h11 = exp(2 t1): Gt^1_11 = h^11/2 * d h11/d t1 = 1 for every t1
    h = MetricField.temporal(((ex.exp(ex.mul(2.0, ex.t_var(1))),),))
    gam = christoffel_sym(h)
    for t1 in (-1.0, 0.0, 0.7, 2.5):
        b = Bindings.from_names(1, 1, {"t1": t1})
        assert ex.evaluate(gam[0][0][0], b) == pytest.approx(1.0, rel=1e-12)


def test_christoffel_sphere_values():
    gam = christoffel_sym(support.sphere_metric())
    theta = 1.1
    b = Bindings.from_names(1, 2, {"x1": theta, "x2": 0.4})
    assert ex.evaluate(gam[0][1][1], b) == pytest.approx(
        -math.sin(theta) * math.cos(theta), rel=1e-12
    )
    assert ex.evaluate(gam[1][0][1], b) == pytest.approx(
        math.cos(theta) / math.sin(theta), rel=1e-12
    )
    assert ex.evaluate(gam[1][1][0], b) == pytest.approx(
        math.cos(theta) / math.sin(theta), rel=1e-12
    )
    assert ex.is_zero(ex.simplify(gam[0][0][0]))


def test_christoffel_against_fd_oracle():
    g = support.random_spd_metric(ex.SPATIAL, 3, seed=31)
    gam = christoffel_sym(g)
    rng = np.random.default_rng(32)
    for _ in range(10):
        z = rng.uniform(-1, 1, size=3)
        want = support.fd_christoffel(support.metric_fn(g), z)
        b = Bindings.from_names(1, 3, {"x1": z[0], "x2": z[1], "x3": z[2]})
        got = support.eval_nested(gam, b)
        assert support.rel_max(got, want) < 1e-7


def test_christoffel_lower_symmetry_shares_nodes():
    g = support.random_spd_metric(ex.TEMPORAL, 2, seed=41)
    gam = christoffel_sym(g)
    assert gam[0][0][1] is gam[0][1][0]


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------


def test_curvature_flat_structurally_zero():
    R = curvature_sym(support.flat_metric(ex.SPATIAL, 2))
    for block in R:
        for plane in block:
            for row in plane:
                for entry in row:
                    assert ex.is_zero(entry)


def test_curvature_sphere_sectional_is_one():
    R = curvature_sym(support.sphere_metric())
    for theta in (0.4, 1.0, 2.2):
        b = Bindings.from_names(1, 2, {"x1": theta, "x2": 1.3})
        K = ex.evaluate(R[0][1][1][0], b) / math.sin(theta) ** 2
        assert K == pytest.approx(1.0, rel=1e-10)


def test_curvature_antisymmetric_in_last_two():
    g = support.random_spd_metric(ex.SPATIAL, 3, seed=51)
    R = curvature_sym(g)
    rng = np.random.default_rng(52)
    z = rng.uniform(-1, 1, size=3)
    b = Bindings.from_names(1, 3, {"x1": z[0], "x2": z[1], "x3": z[2]})
    vals = support.eval_nested(R, b)
    assert support.rel_max(vals, -vals.transpose(0, 1, 3, 2)) < 1e-12


def test_curvature_first_bianchi_cyclic_sum():
    g = support.random_spd_metric(ex.SPATIAL, 3, seed=53)
    R = curvature_sym(g)
    rng = np.random.default_rng(54)
    for _ in range(5):
        z = rng.uniform(-1, 1, size=3)
        b = Bindings.from_names(1, 3, {"x1": z[0], "x2": z[1], "x3": z[2]})
        vals = support.eval_nested(R, b)
        cyc = vals + vals.transpose(0, 3, 1, 2) + vals.transpose(0, 2, 3, 1)
        assert np.max(np.abs(cyc)) < 1e-10


def test_curvature_against_fd_oracle():
    g = support.random_spd_metric(ex.SPATIAL, 2, seed=55)
    gam = christoffel_sym(g)

    def gamma_fn(z):
        b = Bindings.from_names(1, 2, {"x1": z[0], "x2": z[1]})
        return support.eval_nested(gam, b)

    R = curvature_sym(g)
    rng = np.random.default_rng(56)
    for _ in range(5):
        z = rng.uniform(-1, 1, size=2)
        want = support.fd_curvature_from_christoffel(gamma_fn, z)
        b = Bindings.from_names(1, 2, {"x1": z[0], "x2": z[1]})
        got = support.eval_nested(R, b)
        assert support.rel_max(got, want) < 1e-6


# ---------------------------------------------------------------------------
# canonical semisprays / connections
# ---------------------------------------------------------------------------


def test_canonical_objects_flat_pair_vanish():
    h = support.flat_metric(ex.TEMPORAL, 2)
    phi = support.flat_metric(ex.SPATIAL, 2)
    for nested in (
        canonical_temporal_semispray(h, 2),
        canonical_spatial_semispray(phi, 2),
        canonical_temporal_connection(h, 2),
        canonical_spatial_connection(phi, 2),
    ):
        flat_vals = np.ravel(support.eval_nested(nested, sample_jet_points(2, 2, 1, 3)[0].bindings()))
        assert np.max(np.abs(flat_vals)) == 0.0


def test_temporal_connection_is_twice_semispray():
    h = support.random_spd_metric(ex.TEMPORAL, 2, seed=61)
    h0 = canonical_temporal_semispray(h, 2)
    m0 = canonical_temporal_connection(h, 2)
    for p in sample_jet_points(2, 2, 5, seed=62):
        b = p.bindings()
        a = support.eval_nested(h0, b)
        c = support.eval_nested(m0, b)
        assert np.array_equal(c, 2.0 * a)


def test_canonical_spatial_objects_match_direct_contraction():
    phi = support.sphere_metric()
    gam = christoffel_sym(phi)
    g0 = canonical_spatial_semispray(phi, 1)
    n0 = canonical_spatial_connection(phi, 1)
    for p in sample_jet_points(1, 2, 5, seed=63):
        b = p.bindings()
        gnum = support.eval_nested(gam, b)
        want_g = 0.5 * np.einsum("ipq,p,q->i", gnum, p.v[:, 0], p.v[:, 0])
        got_g = support.eval_nested(g0, b)[:, 0, 0]
        assert support.rel_max(got_g, want_g) < 1e-12
        want_n = np.einsum("ijr,r->ij", gnum, p.v[:, 0])
        got_n = support.eval_nested(n0, b)[:, 0, :]
        assert support.rel_max(got_n, want_n) < 1e-12


# ---------------------------------------------------------------------------
# d-tensor values and canonical tensors
# ---------------------------------------------------------------------------


def test_dtensor_value_shape_validation():
    with pytest.raises(ValueError, match="slot extents"):
        DTensorValue(2, 1, (Slot(ex.SPATIAL, True),), np.zeros(2))


def test_dtensor_value_pair_validation():
    with pytest.raises(ValueError, match="exactly two"):
        DTensorValue(1, 1, (Slot(ex.SPATIAL, True, pair=1),), np.zeros(1))
    with pytest.raises(ValueError, match="couple"):
        DTensorValue(
            1,
            1,
            (Slot(ex.SPATIAL, True, pair=1), Slot(ex.TEMPORAL, True, pair=1)),
            np.zeros((1, 1)),
        )


def test_canonical_tensors_values():
    h = MetricField.temporal(
        ((ex.add(2.0, ex.sin(ex.t_var(1))), ex.ZERO), (ex.ZERO, ex.ONE))
    )
    p = JetPoint([0.3, 0.1], [1.0, 2.0], [[1.0, 2.0], [3.0, 4.0]])
    c_val, j_val = canonical_tensors(h, p)
    assert np.array_equal(c_val.values, p.v)
    hm = h.evaluate(p.t)
    for i in range(2):
        for j in range(2):
            block = j_val.values[i, :, :, j]
            if i == j:
                assert np.allclose(block, hm)
            else:
                assert np.all(block == 0.0)


# ---------------------------------------------------------------------------
# PDE systems
# ---------------------------------------------------------------------------


def test_pde_system_from_upper_mirrors_and_shares():
    f = parse("v1_1*v1_2", 2, 1)
    sys_ = PdeSystem.from_upper(
        2, 1, {(1, 1, 1): ex.ZERO, (1, 1, 2): f, (1, 2, 2): ex.ZERO}
    )
    assert sys_.component(1, 2, 1) is sys_.component(1, 1, 2)
    assert sys_.symmetric


def test_pde_system_rejects_incomplete_grid():
    with pytest.raises(ValueError, match="grid mismatch"):
        PdeSystem(1, 1, {})
    with pytest.raises(ValueError, match="a <= b"):
        PdeSystem.from_upper(2, 1, {(1, 2, 1): ex.ZERO})


def test_pde_system_rejects_out_of_range_variables():
    with pytest.raises(ex.ParseError, match="out of range"):
        PdeSystem.from_upper(1, 1, {(1, 1, 1): ex.v_var(2, 1)})


def test_affine_system_flat_pair_structurally_zero():
    sys_ = build_affine_system(
        support.flat_metric(ex.TEMPORAL, 2), support.flat_metric(ex.SPATIAL, 2)
    )
    assert all(ex.is_zero(ex.simplify(e)) for e in sys_.comps.values())


def test_affine_system_matches_fd_built_components():
    # independent path: numeric Christoffels by finite differences of both
    # metrics, then F^i_ab = Gs^i_pq v^p_a v^q_b - Gt^u_ab v^i_u
    h = support.trig_diagonal_metric(ex.TEMPORAL, 2, seed=71)
    phi = support.random_spd_metric(ex.SPATIAL, 2, seed=72)
    sys_ = build_affine_system(h, phi)
    for p in sample_jet_points(2, 2, 6, seed=73):
        gt = support.fd_christoffel(support.metric_fn(h), p.t)
        gs = support.fd_christoffel(support.metric_fn(phi), p.x)
        want = np.einsum("ipq,pa,qb->iab", gs, p.v, p.v) - np.einsum(
            "uab,iu->iab", gt, p.v
        )
        got = sys_.evaluate(p)
        assert support.rel_max(got, want) < 1e-7


def test_affine_system_equals_connection_plus_twice_semispray():
    # exact equality on the stored (a <= b) triangle, whose mirror shares nodes
    h = support.random_spd_metric(ex.TEMPORAL, 2, seed=74)
    phi = support.random_spd_metric(ex.SPATIAL, 2, seed=75)
    sys_ = build_affine_system(h, phi)
    m0 = canonical_temporal_connection(h, 2)
    g0 = canonical_spatial_semispray(phi, 2)
    for p in sample_jet_points(2, 2, 4, seed=76):
        b = p.bindings()
        m0v = support.eval_nested(m0, b)
        g0v = support.eval_nested(g0, b)
        got = sys_.evaluate(p)
        for i in range(2):
            for a in range(2):
                for c in range(a, 2):
                    want = m0v[i, a, c] + 2.0 * g0v[i, a, c]
                    assert got[i, a, c] == want
                    assert got[i, c, a] == want


def test_first_order_single_time_matches_hand_derivative():
    # m = 1, X = sin(t1) + x1^2: F = -(cos(t1) + 2 x1 v1_1)
    X = {(1, 1): parse("sin(t1) + x1^2", 1, 1)}
    sys_ = build_first_order_system(X, 1, 1)
    p = JetPoint([0.4], [1.5], [[2.0]])
    want = -(math.cos(0.4) + 2.0 * 1.5 * 2.0)
    assert sys_.evaluate(p)[0, 0, 0] == pytest.approx(want, rel=1e-12)


def test_first_order_multi_time_warns_when_asymmetric():
    X = {
        (1, 1): parse("x1*t2", 2, 1),
        (1, 2): parse("0", 2, 1),
    }
    with pytest.warns(RuntimeWarning, match="asymmetric"):
        sys_ = build_first_order_system(X, 2, 1)
    assert not sys_.symmetric
    # as-written components: F^1_12 = -(dX^1_1/dt^2 + dX^1_1/dx1 * v1_2)
    p = JetPoint([0.5, 0.3], [1.2], [[0.7, -0.4]])
    got = sys_.evaluate(p)
    assert got[0, 0, 1] == pytest.approx(-(1.2 + 0.3 * -0.4), rel=1e-12)
    assert got[0, 1, 0] == pytest.approx(0.0, abs=1e-15)


def test_first_order_symmetrize_averages():
    X = {
        (1, 1): parse("x1*t2", 2, 1),
        (1, 2): parse("0", 2, 1),
    }
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sys_ = build_first_order_system(X, 2, 1, symmetrize=True)
    assert sys_.symmetric
    p = JetPoint([0.5, 0.3], [1.2], [[0.7, -0.4]])
    got = sys_.evaluate(p)
    expect = 0.5 * (-(1.2 + 0.3 * -0.4) + 0.0)
    assert got[0, 0, 1] == pytest.approx(expect, rel=1e-12)
    assert got[0, 0, 1] == got[0, 1, 0]


def test_first_order_rejects_velocity_dependence():
    with pytest.raises(ValueError, match="must not use velocities"):
        build_first_order_system({(1, 1): parse("v1_1", 1, 1)}, 1, 1)
