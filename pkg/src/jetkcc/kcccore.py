"""Semisprays, connections, deviation invariants, and equation residuals.

Everything in this module is derived from a second-order system
x''^i_ab + F^i_ab(t, x, v) = 0 together with a temporal metric h.  The
central object is :class:`InvariantPipeline`, which builds the connection
and the five deviation invariants of the pair symbolically exactly once
and caches them; module-level functions wrap it for one-shot use.  After
the build phase every cached expression is immutable, so point evaluation
is pure and safe to run from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import exprlang as ex
from .exprlang import (
    SPATIAL,
    TEMPORAL,
    VELOCITY,
    Bindings,
    Expression,
    add,
    differentiate,
    expr_sum,
    mul,
    neg,
    simplify,
    sub,
    substitute,
)
from .jetgeom import (
    MAX_DIM,
    DTensorValue,
    JetPoint,
    MetricField,
    PdeSystem,
    Slot,
    batch_bindings,
    canonical_temporal_connection,
    christoffel_sym,
)

# a section must satisfy the second-order system this tightly before the
# deviation-form rewriting (which substitutes the system) is applied to it
SOLUTION_TOL = 1e-8


class SectionNotSolutionError(ValueError):
    """Raised when an operation that substitutes the second-order system
    along a section is handed a section that does not solve it."""

    def __init__(self, max_residual: float, tol: float, t):
        self.max_residual = max_residual
        self.tol = tol
        self.t = tuple(float(c) for c in t)
        super().__init__(
            f"section is not a solution at t={self.t}: max |x'' + F| = "
            f"{max_residual:.3e} exceeds {tol:.1e}; the identity being "
            "evaluated substitutes the system and is meaningless off it"
        )


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


def _freeze(nested):
    if isinstance(nested, (tuple, list)):
        return tuple(_freeze(k) for k in nested)
    return ex.as_expr(nested)


def _validate_family(comps, m, n, extents, what, symmetric_last_two=False):
    """Check a nested expression family: shape, index bounds, and (when
    asked) structural symmetry of the trailing two axes."""

    def walk(node, shape):
        if not shape:
            if not isinstance(node, Expression):
                raise TypeError(f"{what}: leaf is not an Expression")
            ex.check_bounds(node, m, n)
            return
        if not isinstance(node, tuple) or len(node) != shape[0]:
            raise ValueError(f"{what}: expected extent {shape[0]} at depth")
        for kid in node:
            walk(kid, shape[1:])

    walk(comps, list(extents))
    if symmetric_last_two:
        last = extents[-1]
        for block in comps:
            for a in range(last):
                for b in range(a + 1, last):
                    lhs, rhs = block[a][b], block[b][a]
                    if lhs is not rhs and lhs != rhs:
                        raise ValueError(
                            f"{what}: components must be stored symmetric "
                            f"in the two trailing indices"
                        )


@dataclass(frozen=True)
class TemporalSemispray:
    """Coefficient family H^i_ab(t, x, v), symmetric in (a, b)."""

    m: int
    n: int
    components: tuple  # [i-1][a-1][b-1]

    def __post_init__(self):
        object.__setattr__(self, "components", _freeze(self.components))
        _validate_family(
            self.components,
            self.m,
            self.n,
            (self.n, self.m, self.m),
            "temporal semispray",
            symmetric_last_two=True,
        )

    def component(self, i: int, a: int, b: int) -> Expression:
        return self.components[i - 1][a - 1][b - 1]


@dataclass(frozen=True)
class SpatialSemispray:
    """Coefficient family G^i_ab(t, x, v), symmetric in (a, b)."""

    m: int
    n: int
    components: tuple  # [i-1][a-1][b-1]

    def __post_init__(self):
        object.__setattr__(self, "components", _freeze(self.components))
        _validate_family(
            self.components,
            self.m,
            self.n,
            (self.n, self.m, self.m),
            "spatial semispray",
            symmetric_last_two=True,
        )

    def component(self, i: int, a: int, b: int) -> Expression:
        return self.components[i - 1][a - 1][b - 1]


@dataclass(frozen=True)
class NonlinearConnection:
    """Pair of coefficient families: temporal part M^i_ab (symmetric in the
    temporal indices) and spatial part N^i_aj."""

    m: int
    n: int
    temporal: tuple  # [i-1][a-1][b-1]
    spatial: tuple  # [i-1][a-1][j-1]

    def __post_init__(self):
        object.__setattr__(self, "temporal", _freeze(self.temporal))
        object.__setattr__(self, "spatial", _freeze(self.spatial))
        _validate_family(
            self.temporal,
            self.m,
            self.n,
            (self.n, self.m, self.m),
            "connection temporal part",
            symmetric_last_two=True,
        )
        _validate_family(
            self.spatial,
            self.m,
            self.n,
            (self.n, self.m, self.n),
            "connection spatial part",
        )


def _check_t_only(comps, m, what):
    for e in comps:
        for vid in ex.free_variables(e):
            if vid.kind != TEMPORAL or vid.alpha > m:
                raise ValueError(
                    f"{what} components may only use t1..t{m}; found "
                    f"'{vid.name}'"
                )


def _t_bindings(m: int, n: int, t) -> Bindings:
    t = np.asarray(t, dtype=float).reshape(-1)
    if t.shape != (m,):
        raise ValueError(f"expected {m} temporal coordinates, got {t.shape}")
    vals = {ex.VariableId(TEMPORAL, alpha=a + 1): float(t[a]) for a in range(m)}
    return Bindings(m, n, vals)


@dataclass(frozen=True)
class SectionMap:
    """A map t -> x(t): one expression per spatial component, t-variables
    only.  Differentiation along it and its first prolongation (x, dx/dt)
    are precomputed at construction."""

    m: int
    comps: tuple  # length n, Expressions in t only

    def __post_init__(self):
        comps = tuple(ex.as_expr(c) for c in self.comps)
        object.__setattr__(self, "comps", comps)
        if not 1 <= self.m <= MAX_DIM or not 1 <= len(comps) <= MAX_DIM:
            raise ValueError("dimensions must satisfy 1 <= m, n <= 4")
        _check_t_only(comps, self.m, "section")
        vel = tuple(
            tuple(differentiate(c, ex.t_var(a + 1)) for a in range(self.m))
            for c in comps
        )
        object.__setattr__(self, "velocity", vel)

    @property
    def n(self) -> int:
        return len(self.comps)

    def prolongation_map(self) -> dict:
        """Substitution map sending x^i and v^i_a to their expressions in t."""
        out = {}
        for i, c in enumerate(self.comps):
            out[ex.VariableId(SPATIAL, i=i + 1)] = c
            for a in range(self.m):
                out[ex.VariableId(VELOCITY, i=i + 1, alpha=a + 1)] = (
                    self.velocity[i][a]
                )
        return out

    def prolongation_point(self, t) -> JetPoint:
        """Numeric jet point (t, x(t), dx/dt(t))."""
        tb = _t_bindings(self.m, self.n, t)
        x = np.array([ex.evaluate(c, tb) for c in self.comps])
        v = np.array(
            [[ex.evaluate(d, tb) for d in row] for row in self.velocity]
        )
        return JetPoint(np.asarray(t, dtype=float), x, v)


@dataclass(frozen=True)
class VariationField:
    """A perturbation direction xi(t): one expression per spatial component,
    t-variables only."""

    m: int
    comps: tuple  # length n

    def __post_init__(self):
        comps = tuple(ex.as_expr(c) for c in self.comps)
        object.__setattr__(self, "comps", comps)
        if not 1 <= self.m <= MAX_DIM or not 1 <= len(comps) <= MAX_DIM:
            raise ValueError("dimensions must satisfy 1 <= m, n <= 4")
        _check_t_only(comps, self.m, "variation field")
        deriv = tuple(
            tuple(differentiate(c, ex.t_var(a + 1)) for a in range(self.m))
            for c in comps
        )
        object.__setattr__(self, "derivative", deriv)

    @property
    def n(self) -> int:
        return len(self.comps)


# ---------------------------------------------------------------------------
# semispray <-> connection correspondences
# ---------------------------------------------------------------------------


def connection_part_from_temporal_semispray(H: TemporalSemispray):
    """Temporal connection part of a temporal semispray: M = 2 H.

    The inverse map halves it back; because constant factors collapse, the
    round trip returns the original expression objects.
    """
    return tuple(
        tuple(tuple(mul(2.0, e) for e in row) for row in plane)
        for plane in H.components
    )


def temporal_semispray_from_connection_part(
    M, m: int, n: int
) -> TemporalSemispray:
    """Temporal semispray whose doubled components reproduce M: H = M / 2."""
    comps = tuple(
        tuple(tuple(mul(0.5, e) for e in row) for row in plane)
        for plane in _freeze(M)
    )
    return TemporalSemispray(m, n, comps)


def spatial_semispray_from_system(
    system: PdeSystem, h: MetricField
) -> SpatialSemispray:
    """G^i_ab = F^i_ab/2 + (1/2) H^u_ab v^i_u, with H the connection
    coefficients of h.  The system is reconstructed from it exactly as
    F = 2G - H v."""
    _require_temporal(h, system.m)
    if not system.symmetric:
        raise ValueError(
            "spatial semispray requires a symmetric second-order system"
        )
    m, n = system.m, system.n
    gt = christoffel_sym(h)
    comps = [[[None] * m for _ in range(m)] for _ in range(n)]
    for i in range(n):
        for a in range(m):
            for b in range(a, m):
                drift = expr_sum(
                    mul(gt[u][a][b], ex.v_var(i + 1, u + 1)) for u in range(m)
                )
                entry = add(
                    mul(0.5, system.component(i + 1, a + 1, b + 1)),
                    mul(0.5, drift),
                )
                comps[i][a][b] = entry
                comps[i][b][a] = entry
    return SpatialSemispray(m, n, _freeze(comps))


def spatial_semispray_from_connection(
    connection: NonlinearConnection,
) -> SpatialSemispray:
    """Spatial semispray generated by a connection's spatial part:
    G^i_ab = (1/2) N^i_ar v^r_b.

    The raw product need not be symmetric in (a, b) for an arbitrary N, so
    the symmetric average is stored; when N itself comes from a symmetric
    v-quadratic system with t-independent h the average changes nothing.
    """
    m, n = connection.m, connection.n
    N = connection.spatial
    comps = [[[None] * m for _ in range(m)] for _ in range(n)]
    for i in range(n):
        for a in range(m):
            for b in range(a, m):
                one = expr_sum(
                    mul(N[i][a][r], ex.v_var(r + 1, b + 1)) for r in range(n)
                )
                if a == b:
                    entry = mul(0.5, one)
                else:
                    other = expr_sum(
                        mul(N[i][b][r], ex.v_var(r + 1, a + 1))
                        for r in range(n)
                    )
                    entry = mul(0.25, add(one, other))
                comps[i][a][b] = entry
                comps[i][b][a] = entry
    return SpatialSemispray(m, n, _freeze(comps))


def _require_temporal(h: MetricField, m: int):
    if h.kind != TEMPORAL:
        raise ValueError("expected a temporal metric")
    if h.dim != m:
        raise ValueError(
            f"temporal metric dimension {h.dim} != system dimension {m}"
        )


# ---------------------------------------------------------------------------
# the invariant pipeline
# ---------------------------------------------------------------------------

# selector strings used by the command-line surface and reports
INVARIANT_NAMES = ("eps", "P", "R", "B", "D")

_SELECTOR_ATTR = {
    "eps": "first_invariant",
    "P": "deviation_curvature",
    "R": "third_invariant",
    "B": "fourth_invariant",
    "D": "fifth_invariant",
}


def invariant_slots(name: str) -> tuple[Slot, ...]:
    """Index signature of one invariant, in storage order."""
    if name == "eps":
        return (
            Slot(SPATIAL, True, pair=1),
            Slot(TEMPORAL, False, pair=1),
            Slot(TEMPORAL, False),
        )
    if name == "P":
        return (Slot(SPATIAL, True), Slot(SPATIAL, False))
    if name == "R":
        return (
            Slot(SPATIAL, True),
            Slot(TEMPORAL, True),
            Slot(SPATIAL, False),
            Slot(SPATIAL, False),
        )
    if name == "B":
        return (
            Slot(SPATIAL, True),
            Slot(TEMPORAL, True),
            Slot(SPATIAL, False),
            Slot(SPATIAL, False),
            Slot(SPATIAL, False),
            Slot(TEMPORAL, True),
        )
    if name == "D":
        return (
            Slot(SPATIAL, True, pair=1),
            Slot(TEMPORAL, False, pair=1),
            Slot(TEMPORAL, False),
            Slot(SPATIAL, False, pair=2),
            Slot(TEMPORAL, True, pair=2),
            Slot(SPATIAL, False, pair=3),
            Slot(TEMPORAL, True, pair=3),
            Slot(SPATIAL, False, pair=4),
            Slot(TEMPORAL, True, pair=4),
        )
    raise KeyError(f"unknown invariant selector '{name}'")


class InvariantPipeline:
    """Build-once cache of everything derived from a (system, h) pair.

    Each family of expressions is constructed lazily on first access and
    kept; repeated point evaluations then share the same immutable trees.
    """

    def __init__(self, system: PdeSystem, h: MetricField):
        _require_temporal(h, system.m)
        self.system = system
        self.h = h
        self.m = system.m
        self.n = system.n

    # -- metric-level pieces ------------------------------------------------

    @cached_property
    def h_inverse_rows(self):
        return self.h.inverse().rows

    @cached_property
    def temporal_christoffel(self):
        return christoffel_sym(self.h)

    @cached_property
    def trace_system(self):
        """F^i = h^{ab} F^i_ab — the metric trace of the system."""
        hinv = self.h_inverse_rows
        m, n = self.m, self.n
        return tuple(
            simplify(
                expr_sum(
                    mul(hinv[a][b], self.system.component(i + 1, a + 1, b + 1))
                    for a in range(m)
                    for b in range(m)
                )
            )
            for i in range(n)
        )

    @cached_property
    def trace_temporal(self):
        """H^g = h^{ab} H^g_ab — the metric trace of h's own connection."""
        hinv = self.h_inverse_rows
        gt = self.temporal_christoffel
        m = self.m
        return tuple(
            simplify(
                expr_sum(
                    mul(hinv[a][b], gt[g][a][b])
                    for a in range(m)
                    for b in range(m)
                )
            )
            for g in range(m)
        )

    @cached_property
    def _trace_system_dv(self):
        """table[i][j][g] = d F^i / d v^j_g (derivatives of the trace)."""
        m, n = self.m, self.n
        return tuple(
            tuple(
                tuple(
                    differentiate(self.trace_system[i], ex.v_var(j + 1, g + 1))
                    for g in range(m)
                )
                for j in range(n)
            )
            for i in range(n)
        )

    @cached_property
    def _half_traced_drift(self):
        """drift[a] = (1/2) sum_g H^g h_{ga}; shared by N's diagonal and
        the velocity terms of the first invariant."""
        hrows = self.h.rows
        return tuple(
            simplify(
                mul(
                    0.5,
                    expr_sum(
                        mul(self.trace_temporal[g], hrows[g][a])
                        for g in range(self.m)
                    ),
                )
            )
            for a in range(self.m)
        )

    # -- connection and semispray -------------------------------------------

    @cached_property
    def connection(self) -> NonlinearConnection:
        """Nonlinear connection of the pair: temporal part is twice the
        canonical temporal coefficients of h; spatial part is
        N^i_aj = (1/2)(dF^i/dv^j_g) h_{ga} + drift[a] delta^i_j."""
        m, n = self.m, self.n
        hrows = self.h.rows
        dF = self._trace_system_dv
        spatial = []
        for i in range(n):
            plane = []
            for a in range(m):
                row = []
                for j in range(n):
                    entry = mul(
                        0.5,
                        expr_sum(
                            mul(dF[i][j][g], hrows[g][a]) for g in range(m)
                        ),
                    )
                    if i == j:
                        entry = add(entry, self._half_traced_drift[a])
                    row.append(simplify(entry))
                plane.append(tuple(row))
            spatial.append(tuple(plane))
        return NonlinearConnection(
            m,
            n,
            canonical_temporal_connection(self.h, n),
            tuple(spatial),
        )

    @cached_property
    def semispray(self) -> SpatialSemispray:
        return spatial_semispray_from_system(self.system, self.h)

    # -- the five invariants --------------------------------------------------

    @cached_property
    def first_invariant(self):
        """eps[i][a][b] = -F^i_ab + N^i_ar v^r_b - H^u_ab v^i_u."""
        m, n = self.m, self.n
        N = self.connection.spatial
        gt = self.temporal_christoffel
        out = []
        for i in range(n):
            plane = []
            for a in range(m):
                row = []
                for b in range(m):
                    terms = [neg(self.system.component(i + 1, a + 1, b + 1))]
                    for r in range(n):
                        terms.append(mul(N[i][a][r], ex.v_var(r + 1, b + 1)))
                    for u in range(m):
                        terms.append(
                            neg(mul(gt[u][a][b], ex.v_var(i + 1, u + 1)))
                        )
                    row.append(simplify(expr_sum(terms)))
                plane.append(tuple(row))
            out.append(tuple(plane))
        return tuple(out)

    @cached_property
    def deviation_curvature(self):
        """P[i][j]: the deviation operator whose sign structure governs how
        nearby solutions spread."""
        m, n = self.m, self.n
        Ftr = self.trace_system
        Htr = self.trace_temporal
        hrows = self.h.rows
        hinv = self.h_inverse_rows
        dF = self._trace_system_dv
        tv = [ex.t_var(g + 1) for g in range(m)]
        xv = [ex.x_var(r + 1) for r in range(n)]
        vv = [[ex.v_var(r + 1, g + 1) for g in range(m)] for r in range(n)]
        dh = [
            [
                [differentiate(hrows[u][g], tv[e]) for e in range(m)]
                for g in range(m)
            ]
            for u in range(m)
        ]

        # scalar part multiplying the identity
        k_terms = [
            mul(0.5, expr_sum(differentiate(Htr[g], tv[g]) for g in range(m)))
        ]
        k_terms.append(
            mul(
                0.5,
                expr_sum(
                    mul(hinv[g][e], mul(dh[u][g][e], Htr[u]))
                    for g in range(m)
                    for e in range(m)
                    for u in range(m)
                ),
            )
        )
        k_terms.append(
            neg(
                mul(
                    0.25,
                    expr_sum(
                        mul(hrows[g][u], mul(Htr[g], Htr[u]))
                        for g in range(m)
                        for u in range(m)
                    ),
                )
            )
        )
        k_scalar = simplify(expr_sum(k_terms))

        out = []
        for i in range(n):
            row = []
            for j in range(n):
                terms = [neg(differentiate(Ftr[i], xv[j]))]
                terms.append(
                    mul(
                        0.5,
                        expr_sum(
                            differentiate(dF[i][j][g], tv[g]) for g in range(m)
                        ),
                    )
                )
                terms.append(
                    mul(
                        0.5,
                        expr_sum(
                            mul(differentiate(dF[i][j][g], xv[r]), vv[r][g])
                            for r in range(n)
                            for g in range(m)
                        ),
                    )
                )
                terms.append(
                    neg(
                        mul(
                            0.5,
                            expr_sum(
                                mul(
                                    differentiate(dF[i][j][u], vv[r][g]),
                                    self.system.component(r + 1, g + 1, u + 1),
                                )
                                for r in range(n)
                                for g in range(m)
                                for u in range(m)
                            ),
                        )
                    )
                )
                terms.append(
                    mul(
                        0.25,
                        expr_sum(
                            mul(hrows[g][u], mul(dF[i][r][g], dF[r][j][u]))
                            for r in range(n)
                            for g in range(m)
                            for u in range(m)
                        ),
                    )
                )
                terms.append(
                    mul(
                        0.5,
                        expr_sum(
                            mul(hinv[g][e], mul(dh[u][g][e], dF[i][j][u]))
                            for g in range(m)
                            for e in range(m)
                            for u in range(m)
                        ),
                    )
                )
                if i == j:
                    terms.append(k_scalar)
                row.append(simplify(expr_sum(terms)))
            out.append(tuple(row))
        return tuple(out)

    @cached_property
    def _deviation_dv(self):
        """table[i][j][k][a] = d P^i_j / d v^k_a."""
        m, n = self.m, self.n
        P = self.deviation_curvature
        return tuple(
            tuple(
                tuple(
                    tuple(
                        differentiate(P[i][j], ex.v_var(k + 1, a + 1))
                        for a in range(m)
                    )
                    for k in range(n)
                )
                for j in range(n)
            )
            for i in range(n)
        )

    @cached_property
    def third_invariant(self):
        """R[i][a][j][k] = (1/3)(dP^i_j/dv^k_a - dP^i_k/dv^j_a); stored
        antisymmetric in (j, k) with shared negated mirrors."""
        m, n = self.m, self.n
        dP = self._deviation_dv
        out = [
            [[[ex.ZERO] * n for _ in range(n)] for _ in range(m)]
            for _ in range(n)
        ]
        third = 1.0 / 3.0
        for i in range(n):
            for a in range(m):
                for j in range(n):
                    for k in range(j, n):
                        entry = simplify(
                            mul(third, sub(dP[i][j][k][a], dP[i][k][j][a]))
                        )
                        out[i][a][j][k] = entry
                        if k != j:
                            out[i][a][k][j] = neg(entry)
        return _freeze(out)

    @cached_property
    def fourth_invariant(self):
        """B[i][a][j][k][l][b] = d R^{ia}_{jk} / d v^l_b."""
        m, n = self.m, self.n
        R = self.third_invariant
        return tuple(
            tuple(
                tuple(
                    tuple(
                        tuple(
                            tuple(
                                differentiate(
                                    R[i][a][j][k], ex.v_var(l + 1, b + 1)
                                )
                                for b in range(m)
                            )
                            for l in range(n)
                        )
                        for k in range(n)
                    )
                    for j in range(n)
                )
                for a in range(m)
            )
            for i in range(n)
        )

    @cached_property
    def fifth_invariant(self):
        return fifth_invariant(self.system)

    # -- evaluation -----------------------------------------------------------

    def expressions(self, name: str):
        """Cached nested expression family for one invariant selector."""
        try:
            attr = _SELECTOR_ATTR[name]
        except KeyError:
            raise KeyError(f"unknown invariant selector '{name}'") from None
        return getattr(self, attr)

    def evaluate(self, name: str, point: JetPoint) -> DTensorValue:
        vals = ex.evaluate_nested(self.expressions(name), point.bindings())
        return DTensorValue(self.m, self.n, invariant_slots(name), vals)

    def evaluate_batch(self, name: str, points) -> np.ndarray:
        """Component grid with a trailing axis over the supplied points."""
        points = list(points)
        b = batch_bindings(points)
        return ex.evaluate_nested(
            self.expressions(name), b, batch_size=len(points)
        )

    # -- covariant derivatives and deviation-form residuals -------------------

    def total_derivative(self, e: Expression, b: int) -> Expression:
        """Derivative of a jet-space expression in the t^b direction along
        solutions: second derivatives of x are replaced through the system,
        d v^r_g / d t^b = -F^r_gb."""
        m, n = self.m, self.n
        terms = [differentiate(e, ex.t_var(b))]
        for r in range(n):
            terms.append(
                mul(differentiate(e, ex.x_var(r + 1)), ex.v_var(r + 1, b))
            )
        for r in range(n):
            for g in range(m):
                de = differentiate(e, ex.v_var(r + 1, g + 1))
                if ex.is_zero(de):
                    continue
                terms.append(
                    neg(mul(de, self.system.component(r + 1, g + 1, b)))
                )
        return simplify(expr_sum(terms))

    def covariant_derivative_family(self, T):
        """Covariant derivative of a once-temporal family T[i][a] of jet
        expressions, as jet expressions:

        (grad T)^i_ab = D_b T^i_a + N^i_ar T^r_b - H^u_ab T^i_u
        """
        m, n = self.m, self.n
        T = _freeze(T)
        _validate_family(T, m, n, (n, m), "covariant derivative input")
        N = self.connection.spatial
        gt = self.temporal_christoffel
        out = []
        for i in range(n):
            plane = []
            for a in range(m):
                row = []
                for b in range(m):
                    terms = [self.total_derivative(T[i][a], b + 1)]
                    for r in range(n):
                        terms.append(mul(N[i][a][r], T[r][b]))
                    for u in range(m):
                        terms.append(neg(mul(gt[u][a][b], T[i][u])))
                    row.append(simplify(expr_sum(terms)))
                plane.append(tuple(row))
            out.append(tuple(plane))
        return tuple(out)

    def jacobi_lhs_minus_rhs(self, xi: VariationField):
        """Jet expressions of h^{ab} (grad grad xi)^i_ab - P^i_r xi^r, the
        two sides of the deviation-form rewriting of the variational
        equations."""
        m, n = self.m, self.n
        if xi.m != m or xi.n != n:
            raise ValueError("variation field dimensions do not match")
        N = self.connection.spatial
        first = tuple(
            tuple(
                simplify(
                    add(
                        xi.derivative[i][a],
                        expr_sum(
                            mul(N[i][a][r], xi.comps[r]) for r in range(n)
                        ),
                    )
                )
                for a in range(m)
            )
            for i in range(n)
        )
        second = self.covariant_derivative_family(first)
        hinv = self.h_inverse_rows
        P = self.deviation_curvature
        out = []
        for i in range(n):
            lhs = expr_sum(
                mul(hinv[a][b], second[i][a][b])
                for a in range(m)
                for b in range(m)
            )
            rhs = expr_sum(mul(P[i][r], xi.comps[r]) for r in range(n))
            out.append(simplify(sub(lhs, rhs)))
        return tuple(out)


# ---------------------------------------------------------------------------
# module-level wrappers
# ---------------------------------------------------------------------------


def connection_from_system(
    system: PdeSystem, h: MetricField
) -> NonlinearConnection:
    return InvariantPipeline(system, h).connection


def h_traces(system: PdeSystem, h: MetricField):
    """(F^i, H^g): metric traces of the system and of h's connection."""
    pipe = InvariantPipeline(system, h)
    return pipe.trace_system, pipe.trace_temporal


def first_invariant(system: PdeSystem, h: MetricField):
    return InvariantPipeline(system, h).first_invariant


def deviation_curvature(system: PdeSystem, h: MetricField):
    return InvariantPipeline(system, h).deviation_curvature


def third_invariant(system: PdeSystem, h: MetricField):
    return InvariantPipeline(system, h).third_invariant


def fourth_invariant(system: PdeSystem, h: MetricField):
    return InvariantPipeline(system, h).fourth_invariant


def fifth_invariant(system: PdeSystem):
    """D[i][a][b][j][g][k][e][l][u] = third v-derivative of F^i_ab.

    Partial derivatives commute, so each distinct derivative triple is
    built once (in sorted order) and shared across all permutations of the
    three (spatial, temporal) derivative pairs.
    """
    m, n = system.m, system.n
    pairs = [(j, g) for j in range(n) for g in range(m)]
    vv = {p: ex.v_var(p[0] + 1, p[1] + 1) for p in pairs}

    def block_nested(i, a, b):
        base = system.component(i + 1, a + 1, b + 1)
        d1 = {p: differentiate(base, vv[p]) for p in pairs}
        d2 = {}
        for p1 in pairs:
            for p2 in pairs:
                if p2 >= p1:
                    d2[(p1, p2)] = differentiate(d1[p1], vv[p2])
        d3 = {}
        for (p1, p2), e in d2.items():
            for p3 in pairs:
                if p3 >= p2:
                    d3[(p1, p2, p3)] = simplify(differentiate(e, vv[p3]))

        def entry(pj, pk, pl):
            return d3[tuple(sorted((pj, pk, pl)))]

        return tuple(
            tuple(
                tuple(
                    tuple(
                        tuple(
                            tuple(
                                entry((j, g), (k, e), (l, u))
                                for u in range(m)
                            )
                            for l in range(n)
                        )
                        for e in range(m)
                    )
                    for k in range(n)
                )
                for g in range(m)
            )
            for j in range(n)
        )

    return tuple(
        tuple(
            tuple(block_nested(i, a, b) for b in range(m)) for a in range(m)
        )
        for i in range(n)
    )


def covariant_derivative_section(
    T, system: PdeSystem, h: MetricField, sigma: SectionMap, t
) -> np.ndarray:
    """Values of the covariant derivative of T[i][a] along sigma at one t.

    T may depend on all jet variables; its plain derivative is taken as the
    total derivative along the prolonged section (with x'' supplied by the
    system), then the connection terms are added and everything is
    restricted to the prolongation.
    """
    pipe = InvariantPipeline(system, h)
    fam = pipe.covariant_derivative_family(T)
    prol = sigma.prolongation_map()
    tb = _t_bindings(system.m, system.n, t)
    out = np.empty((system.n, system.m, system.m))
    for i in range(system.n):
        for a in range(system.m):
            for b in range(system.m):
                restricted = substitute(fam[i][a][b], prol)
                out[i, a, b] = ex.evaluate(restricted, tb)
    return out


def covariant_derivative_variation(
    xi: VariationField,
    system: PdeSystem,
    h: MetricField,
    sigma: SectionMap,
    t,
) -> np.ndarray:
    """Values of (grad xi)^i_a = d xi^i/d t^a + N^i_ar xi^r along sigma."""
    pipe = InvariantPipeline(system, h)
    N = pipe.connection.spatial
    prol = sigma.prolongation_map()
    tb = _t_bindings(system.m, system.n, t)
    out = np.empty((system.n, system.m))
    for i in range(system.n):
        for a in range(system.m):
            e = add(
                xi.derivative[i][a],
                expr_sum(
                    mul(substitute(N[i][a][r], prol), xi.comps[r])
                    for r in range(system.n)
                ),
            )
            out[i, a] = ex.evaluate(e, tb)
    return out


def sode_residual(system: PdeSystem, sigma: SectionMap, t) -> np.ndarray:
    """x''^i_ab + F^i_ab on the prolongation of sigma, at one t point."""
    if sigma.m != system.m or sigma.n != system.n:
        raise ValueError("section dimensions do not match the system")
    prol = sigma.prolongation_map()
    tb = _t_bindings(system.m, system.n, t)
    out = np.empty((system.n, system.m, system.m))
    for i in range(system.n):
        for a in range(system.m):
            second = [
                differentiate(sigma.velocity[i][a], ex.t_var(b + 1))
                for b in range(system.m)
            ]
            for b in range(system.m):
                e = add(
                    second[b],
                    substitute(
                        system.component(i + 1, a + 1, b + 1), prol
                    ),
                )
                out[i, a, b] = ex.evaluate(e, tb)
    return out


def variational_residual(
    system: PdeSystem, sigma: SectionMap, xi: VariationField, t
) -> np.ndarray:
    """Linearization of the system along sigma applied to xi:

    xi''_ab + (dF^i_ab/dx^k) xi^k + (dF^i_ab/dv^r_u) dxi^r/dt^u,
    with the F-derivatives restricted to the prolongation of sigma.
    """
    if xi.m != system.m or xi.n != system.n:
        raise ValueError("variation field dimensions do not match")
    prol = sigma.prolongation_map()
    tb = _t_bindings(system.m, system.n, t)
    m, n = system.m, system.n
    out = np.empty((n, m, m))
    for i in range(n):
        for a in range(m):
            for b in range(m):
                F = system.component(i + 1, a + 1, b + 1)
                terms = [
                    differentiate(xi.derivative[i][a], ex.t_var(b + 1))
                ]
                for k in range(n):
                    terms.append(
                        mul(
                            substitute(
                                differentiate(F, ex.x_var(k + 1)), prol
                            ),
                            xi.comps[k],
                        )
                    )
                for r in range(n):
                    for u in range(m):
                        terms.append(
                            mul(
                                substitute(
                                    differentiate(F, ex.v_var(r + 1, u + 1)),
                                    prol,
                                ),
                                xi.derivative[r][u],
                            )
                        )
                out[i, a, b] = ex.evaluate(expr_sum(terms), tb)
    return out


def variational_residual_h_trace(
    system: PdeSystem,
    h: MetricField,
    sigma: SectionMap,
    xi: VariationField,
    t,
) -> np.ndarray:
    """Metric trace of the full variational residual: n values."""
    _require_temporal(h, system.m)
    full = variational_residual(system, sigma, xi, t)
    hinv = np.linalg.inv(h.evaluate(np.asarray(t, dtype=float)))
    return np.einsum("ab,iab->i", hinv, full)


def jacobi_identity_residual(
    system: PdeSystem,
    h: MetricField,
    sigma: SectionMap,
    xi: VariationField,
    t,
) -> np.ndarray:
    """h^{ab} (grad grad xi)_ab - P xi along the prolongation of sigma.

    The rewriting that makes this the deviation form of the variational
    equations substitutes the system for x'', so sigma must actually solve
    it at t; otherwise SectionNotSolutionError is raised with the measured
    residual.
    """
    sres = sode_residual(system, sigma, t)
    worst = float(np.max(np.abs(sres)))
    if worst > SOLUTION_TOL:
        raise SectionNotSolutionError(worst, SOLUTION_TOL, np.asarray(t))
    pipe = InvariantPipeline(system, h)
    resid = pipe.jacobi_lhs_minus_rhs(xi)
    prol = sigma.prolongation_map()
    tb = _t_bindings(system.m, system.n, t)
    return np.array(
        [ex.evaluate(substitute(e, prol), tb) for e in resid]
    )
