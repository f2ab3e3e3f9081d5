"""Geometry over the multi-time 1-jet space.

A configuration lives on the product of an m-dimensional time manifold and an
n-dimensional space manifold; a jet point carries (t, x, v) where v[i-1][a-1]
is the velocity of x^i in the t^a direction.  Dimensions are capped at 4.

This module provides the metric-level machinery (inverses, Christoffel
symbols, curvature of the spatial metric), the canonical semisprays and
connections induced by a metric pair, the two canonical d-tensors, the
PDE-system container, and the two system builders used throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import exprlang as ex
from .exprlang import (
    Expression,
    SPATIAL,
    TEMPORAL,
    Bindings,
    VariableId,
    add,
    differentiate,
    div,
    expr_sum,
    mul,
    neg,
    simplify,
    sub,
)

MAX_DIM = 4
DEGENERACY_TOL = 1e-12


class DegenerateMetricError(ValueError):
    """Metric determinant vanished (|det| <= 1e-12) at an evaluation point."""


class JetPoint:
    """Immutable numeric point (t, x, v) on the 1-jet space."""

    __slots__ = ("t", "x", "v")

    def __init__(self, t, x, v):
        t = np.array(t, dtype=float)
        x = np.array(x, dtype=float)
        v = np.array(v, dtype=float)
        if t.ndim != 1 or x.ndim != 1 or v.shape != (x.size, t.size):
            raise ValueError(
                f"jet point shapes inconsistent: t{t.shape}, x{x.shape}, v{v.shape}"
            )
        if not 1 <= t.size <= MAX_DIM or not 1 <= x.size <= MAX_DIM:
            raise ValueError("dimensions must satisfy 1 <= m, n <= 4")
        t.flags.writeable = False
        x.flags.writeable = False
        v.flags.writeable = False
        self.t, self.x, self.v = t, x, v

    @property
    def m(self) -> int:
        return self.t.size

    @property
    def n(self) -> int:
        return self.x.size

    def bindings(self) -> Bindings:
        vals: dict[VariableId, float] = {}
        for a in range(self.m):
            vals[VariableId(TEMPORAL, alpha=a + 1)] = float(self.t[a])
        for i in range(self.n):
            vals[VariableId(SPATIAL, i=i + 1)] = float(self.x[i])
            for a in range(self.m):
                vals[VariableId(ex.VELOCITY, i=i + 1, alpha=a + 1)] = float(
                    self.v[i, a]
                )
        return Bindings(self.m, self.n, vals)

    def __repr__(self):
        return f"JetPoint(t={self.t.tolist()}, x={self.x.tolist()}, v={self.v.tolist()})"


def sample_jet_points(
    m: int,
    n: int,
    count: int,
    seed: int,
    t_box: tuple[float, float] = (-1.0, 1.0),
    x_box: tuple[float, float] = (-1.0, 1.0),
    v_box: tuple[float, float] = (-2.0, 2.0),
) -> list[JetPoint]:
    """Deterministic uniform sample of jet points (one rng stream per call)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        t = rng.uniform(t_box[0], t_box[1], size=m)
        x = rng.uniform(x_box[0], x_box[1], size=n)
        v = rng.uniform(v_box[0], v_box[1], size=(n, m))
        out.append(JetPoint(t, x, v))
    return out


def batch_bindings(points: list[JetPoint]) -> Bindings:
    """Stack many points into array-valued bindings for vectorized evaluation."""
    if not points:
        raise ValueError("no points")
    m, n = points[0].m, points[0].n
    vals: dict[VariableId, np.ndarray] = {}
    for a in range(m):
        vals[VariableId(TEMPORAL, alpha=a + 1)] = np.array([p.t[a] for p in points])
    for i in range(n):
        vals[VariableId(SPATIAL, i=i + 1)] = np.array([p.x[i] for p in points])
        for a in range(m):
            vals[VariableId(ex.VELOCITY, i=i + 1, alpha=a + 1)] = np.array(
                [p.v[i, a] for p in points]
            )
    return Bindings(m, n, vals)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _coord_var(kind: str, k: int) -> ex.Var:
    return ex.t_var(k) if kind == TEMPORAL else ex.x_var(k)


@dataclass(frozen=True)
class MetricField:
    """Symmetric nondegenerate metric on the time or space factor.

    Entries are expressions in that factor's own coordinates only (t-vars for
    a temporal metric, x-vars for a spatial one).  Structural symmetry is
    required at construction; nondegeneracy is checked numerically wherever
    the metric is evaluated.
    """

    kind: str  # TEMPORAL or SPATIAL
    rows: tuple[tuple[Expression, ...], ...]

    def __post_init__(self):
        d = len(self.rows)
        if not 1 <= d <= MAX_DIM or any(len(r) != d for r in self.rows):
            raise ValueError(f"metric must be square with dimension 1..{MAX_DIM}")
        if self.kind not in (TEMPORAL, SPATIAL):
            raise ValueError(f"bad metric kind {self.kind!r}")
        for a in range(d):
            for b in range(a + 1, d):
                ra, rb = self.rows[a][b], self.rows[b][a]
                if ra is not rb and simplify(ra) != simplify(rb):
                    raise ValueError(
                        f"metric not structurally symmetric at ({a + 1},{b + 1}): "
                        f"`{ra}` vs `{rb}`"
                    )
        for row in self.rows:
            for entry in row:
                for vid in ex.free_variables(entry):
                    if vid.kind != self.kind:
                        raise ValueError(
                            f"{self.kind} metric entry uses variable '{vid.name}'"
                        )
                    idx = vid.alpha if self.kind == TEMPORAL else vid.i
                    if not 1 <= idx <= d:
                        raise ValueError(
                            f"metric entry variable '{vid.name}' exceeds dimension {d}"
                        )

    @property
    def dim(self) -> int:
        return len(self.rows)

    @classmethod
    def temporal(cls, rows) -> "MetricField":
        return cls(TEMPORAL, tuple(tuple(ex.as_expr(e) for e in r) for r in rows))

    @classmethod
    def spatial(cls, rows) -> "MetricField":
        return cls(SPATIAL, tuple(tuple(ex.as_expr(e) for e in r) for r in rows))

    def evaluate(self, coords) -> np.ndarray:
        """Numeric (d, d) matrix at the given factor coordinates.

        Raises DegenerateMetricError when |det| <= 1e-12.
        """
        coords = np.asarray(coords, dtype=float)
        d = self.dim
        vals: dict[VariableId, float] = {}
        for k in range(d):
            vid = (
                VariableId(TEMPORAL, alpha=k + 1)
                if self.kind == TEMPORAL
                else VariableId(SPATIAL, i=k + 1)
            )
            vals[vid] = float(coords[k])
        b = Bindings(d if self.kind == TEMPORAL else 1, d if self.kind == SPATIAL else 1, vals)
        out = np.empty((d, d))
        for a in range(d):
            for c in range(d):
                out[a, c] = ex.evaluate(self.rows[a][c], b)
        det = float(np.linalg.det(out))
        if abs(det) <= DEGENERACY_TOL:
            raise DegenerateMetricError(
                f"{self.kind} metric degenerate at {coords.tolist()}: |det| = {abs(det):.3e}"
            )
        return out

    def determinant(self) -> Expression:
        return simplify(_det_expr(self.rows))

    def inverse(self) -> "MetricField":
        """Symbolic inverse via the adjugate (dimension <= 4)."""
        d = self.dim
        det = _det_expr(self.rows)
        inv = [[None] * d for _ in range(d)]
        for a in range(d):
            for b in range(a, d):
                cof = _cofactor_expr(self.rows, a, b)
                entry = simplify(div(cof, det))
                inv[a][b] = entry
                inv[b][a] = entry
        return MetricField(self.kind, tuple(tuple(r) for r in inv))


def _minor(rows, drop_r: int, drop_c: int):
    return tuple(
        tuple(e for c, e in enumerate(row) if c != drop_c)
        for r, row in enumerate(rows)
        if r != drop_r
    )


def _det_expr(rows) -> Expression:
    d = len(rows)
    if d == 0:
        return ex.ONE
    if d == 1:
        return rows[0][0]
    terms = []
    for c in range(d):
        piece = mul(rows[0][c], _det_expr(_minor(rows, 0, c)))
        terms.append(piece if c % 2 == 0 else neg(piece))
    return expr_sum(terms)


def _cofactor_expr(rows, a: int, b: int) -> Expression:
    piece = _det_expr(_minor(rows, b, a))  # adjugate: transpose of cofactors
    return piece if (a + b) % 2 == 0 else neg(piece)


# ---------------------------------------------------------------------------
# Christoffel symbols and curvature
# ---------------------------------------------------------------------------


def inverse_metric_sym(metric: MetricField):
    """Symbolic inverse of a factor metric (same as ``metric.inverse()``)."""
    return metric.inverse()


def christoffel_sym(metric: MetricField):
    """Second-kind Christoffel symbols of a factor metric.

    Returns nested tuples G[a-1][b-1][c-1] of expressions, symmetric in the
    two lower indices (shared nodes).
    """
    d = metric.dim
    inv = metric.inverse()
    coord = [_coord_var(metric.kind, k + 1) for k in range(d)]
    dg = [
        [
            [differentiate(metric.rows[a][b], coord[c]) for c in range(d)]
            for b in range(d)
        ]
        for a in range(d)
    ]
    gamma = [[[None] * d for _ in range(d)] for _ in range(d)]
    for a in range(d):
        for b in range(d):
            for c in range(b, d):
                terms = [
                    mul(
                        inv.rows[a][u],
                        sub(add(dg[b][u][c], dg[c][u][b]), dg[b][c][u]),
                    )
                    for u in range(d)
                ]
                entry = simplify(mul(0.5, expr_sum(terms)))
                gamma[a][b][c] = entry
                gamma[a][c][b] = entry
    return tuple(tuple(tuple(r) for r in plane) for plane in gamma)


def curvature_sym(metric: MetricField):
    """Curvature of the spatial metric's Christoffel connection.

    R[i-1][p-1][q-1][j-1] = dG^i_pq/dx^j - dG^i_pj/dx^q
                            + sum_r (G^r_pq G^i_rj - G^r_pj G^i_rq),
    antisymmetric in its last two indices.
    """
    if metric.kind != SPATIAL:
        raise ValueError("curvature is defined for the spatial metric")
    n = metric.dim
    gam = christoffel_sym(metric)
    xs = [ex.x_var(j + 1) for j in range(n)]
    out = [[[[ex.ZERO] * n for _ in range(n)] for _ in range(n)] for _ in range(n)]
    for i in range(n):
        for p in range(n):
            for q in range(n):
                for j in range(q + 1, n):
                    terms = [differentiate(gam[i][p][q], xs[j])]
                    terms.append(neg(differentiate(gam[i][p][j], xs[q])))
                    for r in range(n):
                        terms.append(mul(gam[r][p][q], gam[i][r][j]))
                        terms.append(neg(mul(gam[r][p][j], gam[i][r][q])))
                    entry = simplify(expr_sum(terms))
                    out[i][p][q][j] = entry
                    out[i][p][j][q] = neg(entry)
    return tuple(
        tuple(tuple(tuple(r) for r in plane) for plane in block) for block in out
    )


# ---------------------------------------------------------------------------
# canonical semisprays / connections of a metric pair
# ---------------------------------------------------------------------------


def canonical_temporal_semispray(h: MetricField, n: int):
    """H0[i][a][b] = -1/2 * sum_u Gt^u_ab v^i_u  (Gt = temporal Christoffels)."""
    if h.kind != TEMPORAL:
        raise ValueError("expected the temporal metric")
    m = h.dim
    gt = christoffel_sym(h)
    out = []
    for i in range(n):
        plane = []
        for a in range(m):
            row = []
            for b in range(m):
                s = expr_sum(
                    mul(gt[u][a][b], ex.v_var(i + 1, u + 1)) for u in range(m)
                )
                row.append(mul(-0.5, s))
            plane.append(tuple(row))
        out.append(tuple(plane))
    return tuple(out)


def canonical_spatial_semispray(phi: MetricField, m: int):
    """G0[i][a][b] = 1/2 * sum_pq Gs^i_pq v^p_a v^q_b  (Gs = spatial Christoffels)."""
    if phi.kind != SPATIAL:
        raise ValueError("expected the spatial metric")
    n = phi.dim
    gs = christoffel_sym(phi)
    out = []
    for i in range(n):
        plane = []
        for a in range(m):
            row = []
            for b in range(m):
                terms = [
                    mul(
                        gs[i][p][q],
                        mul(ex.v_var(p + 1, a + 1), ex.v_var(q + 1, b + 1)),
                    )
                    for p in range(n)
                    for q in range(n)
                ]
                row.append(mul(0.5, expr_sum(terms)))
            plane.append(tuple(row))
        out.append(tuple(plane))
    return tuple(out)


def canonical_temporal_connection(h: MetricField, n: int):
    """M0[i][a][b] = 2 * H0[i][a][b] (nodes shared with the semispray)."""
    h0 = canonical_temporal_semispray(h, n)
    return tuple(
        tuple(tuple(mul(2.0, e) for e in row) for row in plane) for plane in h0
    )


def canonical_spatial_connection(phi: MetricField, m: int):
    """N0[i][a][j] = sum_r Gs^i_jr v^r_a."""
    n = phi.dim
    gs = christoffel_sym(phi)
    out = []
    for i in range(n):
        plane = []
        for a in range(m):
            row = [
                expr_sum(
                    mul(gs[i][j][r], ex.v_var(r + 1, a + 1)) for r in range(n)
                )
                for j in range(n)
            ]
            plane.append(tuple(row))
        out.append(tuple(plane))
    return tuple(out)


def canonical_objects(h: MetricField, phi: MetricField):
    """All four canonical objects of a metric pair in one call.

    Returns (temporal semispray, spatial semispray, temporal connection part,
    spatial connection part) as nested expression tuples; temporal objects use
    phi.dim spatial components and spatial ones h.dim temporal slots.
    """
    m, n = h.dim, phi.dim
    return (
        canonical_temporal_semispray(h, n),
        canonical_spatial_semispray(phi, m),
        canonical_temporal_connection(h, n),
        canonical_spatial_connection(phi, m),
    )


# ---------------------------------------------------------------------------
# d-tensor values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Slot:
    """One index slot of a d-tensor value.

    ``pair`` groups a (spatial upper, temporal lower) or (spatial lower,
    temporal upper) couple born from a jet coordinate or a velocity partial;
    paired slots still transform independently, the grouping is structural
    metadata and is validated for shape.
    """

    kind: str  # TEMPORAL or SPATIAL
    upper: bool
    pair: int = 0


@dataclass
class DTensorValue:
    """Numeric component array of a distinguished tensor at one jet point."""

    m: int
    n: int
    slots: tuple[Slot, ...]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expect = tuple(
            self.m if s.kind == TEMPORAL else self.n for s in self.slots
        )
        if self.values.shape != expect:
            raise ValueError(
                f"component shape {self.values.shape} != slot extents {expect}"
            )
        groups: dict[int, list[Slot]] = {}
        for s in self.slots:
            if s.pair:
                groups.setdefault(s.pair, []).append(s)
        for gid, members in groups.items():
            if len(members) != 2:
                raise ValueError(f"jet pair {gid} must group exactly two slots")
            kinds = {(s.kind, s.upper) for s in members}
            if kinds not in (
                {(SPATIAL, True), (TEMPORAL, False)},
                {(SPATIAL, False), (TEMPORAL, True)},
            ):
                raise ValueError(
                    f"jet pair {gid} must couple spatial-up with temporal-down "
                    "or spatial-down with temporal-up"
                )


def canonical_tensors(h: MetricField, point: JetPoint):
    """The two canonical d-tensors at a point.

    The first is the jet coordinate block itself, v^i_a, with a paired
    (spatial-up, temporal-down) signature; the second is h_ab * delta^i_j.
    """
    m, n = point.m, point.n
    c_val = DTensorValue(
        m,
        n,
        (Slot(SPATIAL, True, pair=1), Slot(TEMPORAL, False, pair=1)),
        point.v.copy(),
    )
    hm = h.evaluate(point.t)
    jv = np.zeros((n, m, m, n))
    for i in range(n):
        jv[i, :, :, i] = hm
    j_val = DTensorValue(
        m,
        n,
        (
            Slot(SPATIAL, True, pair=1),
            Slot(TEMPORAL, False, pair=1),
            Slot(TEMPORAL, False),
            Slot(SPATIAL, False),
        ),
        jv,
    )
    return c_val, j_val


# ---------------------------------------------------------------------------
# second-order PDE systems
# ---------------------------------------------------------------------------


@dataclass
class PdeSystem:
    """Right-hand side family F^i_ab of a second-order system.

    Components are stored on the full (i, a, b) grid; the ``symmetric`` flag
    records whether they were given (or forced) symmetric under a <-> b, in
    which case mirrored entries share nodes.
    """

    m: int
    n: int
    comps: dict[tuple[int, int, int], Expression]
    symmetric: bool = True

    def __post_init__(self):
        if not 1 <= self.m <= MAX_DIM or not 1 <= self.n <= MAX_DIM:
            raise ValueError("dimensions must satisfy 1 <= m, n <= 4")
        want = {
            (i, a, b)
            for i in range(1, self.n + 1)
            for a in range(1, self.m + 1)
            for b in range(1, self.m + 1)
        }
        if set(self.comps) != want:
            missing = sorted(want - set(self.comps))
            extra = sorted(set(self.comps) - want)
            raise ValueError(
                f"component grid mismatch: missing {missing[:4]}, extra {extra[:4]}"
            )
        for key, e in self.comps.items():
            ex.check_bounds(e, self.m, self.n)

    @classmethod
    def from_upper(cls, m: int, n: int, upper: dict) -> "PdeSystem":
        """Build from entries with a <= b; the mirror shares nodes."""
        comps: dict[tuple[int, int, int], Expression] = {}
        for (i, a, b), e in upper.items():
            if a > b:
                raise ValueError(f"entry ({i},{a},{b}) must have a <= b")
            e = ex.as_expr(e)
            comps[(i, a, b)] = e
            comps[(i, b, a)] = e
        return cls(m, n, comps, symmetric=True)

    def component(self, i: int, a: int, b: int) -> Expression:
        return self.comps[(i, a, b)]

    def evaluate(self, point: JetPoint) -> np.ndarray:
        """Numeric (n, m, m) component block at one point."""
        b = point.bindings()
        out = np.empty((self.n, self.m, self.m))
        for (i, al, be), e in self.comps.items():
            out[i - 1, al - 1, be - 1] = ex.evaluate(e, b)
        return out


def build_affine_system(h: MetricField, phi: MetricField) -> PdeSystem:
    """The geodesic-type system of a metric pair.

    F^i_ab = Gs^i_pq v^p_a v^q_b - Gt^u_ab v^i_u, assembled as the canonical
    temporal connection plus twice the canonical spatial semispray (both of
    which already carry their signs).
    """
    m, n = h.dim, phi.dim
    m0 = canonical_temporal_connection(h, n)
    g0 = canonical_spatial_semispray(phi, m)
    upper = {}
    for i in range(n):
        for a in range(m):
            for b in range(a, m):
                upper[(i + 1, a + 1, b + 1)] = add(
                    m0[i][a][b], mul(2.0, g0[i][a][b])
                )
    return PdeSystem.from_upper(m, n, upper)


FIRST_ORDER_ASYM_TOL = 1e-9


def build_first_order_system(
    X: dict, m: int, n: int, symmetrize: bool = False
) -> PdeSystem:
    """Prolong a first-order flow v^i_a = X^i_a(t, x) to second order.

    F^i_ab = -(dX^i_a/dt^b + sum_r dX^i_a/dx^r * v^r_b).  For m >= 2 these
    components need not be symmetric in (a, b); by default they are stored
    as written (with a warning when the asymmetry at sample points exceeds
    tolerance), with ``symmetrize=True`` the average is stored instead.
    """
    table: dict[tuple[int, int], Expression] = {}
    for (i, a), e in X.items():
        e = ex.as_expr(e)
        for vid in ex.free_variables(e):
            if vid.kind == ex.VELOCITY:
                raise ValueError(
                    f"first-order component X({i},{a}) must not use velocities"
                )
        ex.check_bounds(e, m, n)
        table[(i, a)] = e
    want = {(i, a) for i in range(1, n + 1) for a in range(1, m + 1)}
    if set(table) != want:
        raise ValueError("first-order components must cover every (i, a)")

    raw: dict[tuple[int, int, int], Expression] = {}
    for i in range(1, n + 1):
        for a in range(1, m + 1):
            xi = table[(i, a)]
            for b in range(1, m + 1):
                terms = [differentiate(xi, ex.t_var(b))]
                for r in range(1, n + 1):
                    terms.append(
                        mul(differentiate(xi, ex.x_var(r)), ex.v_var(r, b))
                    )
                raw[(i, a, b)] = neg(expr_sum(terms))

    asym = 0.0
    if m > 1:
        for p in sample_jet_points(m, n, 5, seed=20):
            vals = {k: ex.evaluate(e, p.bindings()) for k, e in raw.items()}
            for i in range(1, n + 1):
                for a in range(1, m + 1):
                    for b in range(a + 1, m + 1):
                        asym = max(asym, abs(vals[(i, a, b)] - vals[(i, b, a)]))

    if symmetrize:
        upper = {}
        for i in range(1, n + 1):
            for a in range(1, m + 1):
                for b in range(a, m + 1):
                    upper[(i, a, b)] = simplify(
                        mul(0.5, add(raw[(i, a, b)], raw[(i, b, a)]))
                    )
        return PdeSystem.from_upper(m, n, upper)

    if asym > FIRST_ORDER_ASYM_TOL:
        warnings.warn(
            f"first-order prolongation is asymmetric in its time indices "
            f"(max deviation {asym:.3e} at sample points); storing as written",
            RuntimeWarning,
            stacklevel=2,
        )
    return PdeSystem(m, n, raw, symmetric=asym <= FIRST_ORDER_ASYM_TOL)
