"""Constructive stability certificates from localized boundary currents.

For each cell D_j of a partition of the probed subdomain and each absorption
bracket k, a probing coefficient eta(j,k) is fixed and a boundary current is
sought whose solution concentrates on D_j.  The search runs conjugate
gradients on the normal equations of the current-to-interior operator
T: g -> u|_omega (least-squares form, so the residual decreases monotonically)
against a cell-indicator target; after every iterate the certificate

    beta(j,k) = 1/2 int_{D_j} u^2 - (3b/(2a) - 1/2) int_{omega \ D_j} u^2

is evaluated and the first iterate with beta > 1 is accepted.  The target
indicator is scaled so that its squared interior norm is 3, which makes the
certificate limit of an exactly localized solution equal to 3/2 independently
of the cell area.  Certificates are scale-sensitive (beta and the squared
current norm are both quadratic under scaling of g), and any current with its
own beta > 1 yields a valid stability factor.

The certified sup-norm stability inequality reads

    ||q1 - q2||_inf <= S * ||Lambda(q1) - Lambda(q2)||_M

with stability factor S = max over (j,k) of <g, g>_M; ``lipschitz_constant``
returns its reciprocal L = 1/S together with the accepted currents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CertificateError, FieldError
from .field import BoundaryTrace, NodalField, PiecewiseConstantField
from .fem import (
    assemble,
    element_l2_products,
    element_means,
    solve_neumann,
    solve_source,
)
from .mesh import Partition, TriMesh
from .ntd import boundary_inner, build_ntd, m_weighted_opnorm

ADJOINT_RTOL = 1e-12
DEFAULT_MAX_ITER = 200


@dataclass(frozen=True)
class ProbingSetup:
    """Partitioned subdomain, coefficient bounds, and the known background diffusion."""

    partition: Partition
    a: float
    b: float
    K: int
    sigma: PiecewiseConstantField

    @property
    def mesh(self) -> TriMesh:
        return self.partition.mesh

    @property
    def n_cells(self) -> int:
        return self.partition.n_cells


@dataclass(frozen=True)
class LocalizedCurrent:
    """An accepted localized current with its certificate."""

    j: int
    k: int
    g: BoundaryTrace
    beta: float
    cg_iterations: int
    residuals: np.ndarray

    def norm_sq(self) -> float:
        return boundary_inner(self.g, self.g, self.g.mesh.boundary_mass)


def compute_K(a: float, b: float) -> int:
    """Number of absorption brackets: floor(3(b/a - 1)) + 3."""
    if not 0.0 < a <= b:
        raise FieldError("bounds must satisfy 0 < a <= b")
    return int(math.floor(3.0 * (b / a - 1.0))) + 3


def make_probing_setup(
    partition: Partition,
    a: float,
    b: float,
    sigma_outside: float = 1.0,
    sigma_inside: float = 2.0,
) -> ProbingSetup:
    """Build a probing setup with the two-phase background diffusion."""
    mesh = partition.mesh
    sigma_vals = np.where(partition.omega_mask, sigma_inside, sigma_outside)
    sigma = PiecewiseConstantField(mesh, sigma_vals).require_positive()
    return ProbingSetup(partition, float(a), float(b), compute_K(a, b), sigma)


def eta_field(setup: ProbingSetup, j: int, k: int) -> PiecewiseConstantField:
    """Probing absorption: (k+4)a/3 on cell j, a/3 on the rest of the subdomain, 0 outside."""
    if not 1 <= j <= setup.n_cells:
        raise FieldError(f"cell index {j} out of range 1..{setup.n_cells}")
    if not 1 <= k <= setup.K:
        raise FieldError(f"bracket index {k} out of range 1..{setup.K}")
    part = setup.partition
    values = np.zeros(setup.mesh.n_elements)
    values[part.omega_mask] = setup.a / 3.0
    values[part.cell_mask(j)] = (k + 4) * setup.a / 3.0
    return PiecewiseConstantField(setup.mesh, values)


def cell_values_to_field(partition: Partition, cell_values) -> PiecewiseConstantField:
    """Expand per-cell values to a per-element field, zero outside the subdomain."""
    cell_values = np.asarray(cell_values, dtype=float)
    if cell_values.shape != (partition.n_cells,):
        raise FieldError(f"expected {partition.n_cells} cell values")
    values = np.zeros(partition.mesh.n_elements)
    for j in range(1, partition.n_cells + 1):
        values[partition.cell_mask(j)] = cell_values[j - 1]
    return PiecewiseConstantField(partition.mesh, values)


def bracket_index(setup: ProbingSetup, qj: float) -> int:
    """The k with (k+2)a/3 <= qj < (k+3)a/3, clipped to 1..K."""
    k = int(math.floor(3.0 * qj / setup.a)) - 2
    return min(max(k, 1), setup.K)


def _interior_split(setup: ProbingSetup, j: int):
    part = setup.partition
    cell = part.cell_mask(j)
    rest = part.omega_mask & ~cell
    return cell, rest


def _certificate(setup: ProbingSetup, j: int, usq: np.ndarray) -> float:
    cell, rest = _interior_split(setup, j)
    weight = 3.0 * setup.b / (2.0 * setup.a) - 0.5
    return 0.5 * float(usq[cell].sum()) - weight * float(usq[rest].sum())


def localization_gap(setup: ProbingSetup, q: PiecewiseConstantField, g: BoundaryTrace, j: int) -> float:
    """int_{D_j} u^2 - int_{omega \\ D_j} u^2 for the Neumann solution at absorption q."""
    sys = assemble(setup.mesh, setup.sigma, q)
    u = solve_neumann(sys, g)
    usq = element_l2_products(u, u)
    cell, rest = _interior_split(setup, j)
    return float(usq[cell].sum()) - float(usq[rest].sum())


def find_localized_current(
    setup: ProbingSetup,
    j: int,
    k: int,
    max_iter: int = DEFAULT_MAX_ITER,
    target_scale: float | None = None,
) -> LocalizedCurrent:
    """Search for a boundary current certified by beta(j,k) > 1.

    Runs CG on the normal equations of T: g -> element averages of the
    Neumann solution on the subdomain (adjoint applications use the
    source-to-trace operator), against the indicator of cell j scaled by
    ``target_scale``.  The default scale normalizes the target's squared
    interior norm to 3; because CG iterates are linear in the target and the
    certificate is quadratic, a run that plateaus below 1 with a positive
    certificate is retried once with the target rescaled so that its best
    iterate certifies (the iterate minimizing squared current norm per unit
    certificate is lifted to beta = 1.25).

    Raises :class:`CertificateError` with the best certificate seen if no
    iterate ever achieves a positive certificate or the iteration budget is
    exhausted, which signals a mesh or partition too coarse for the bounds.
    """
    mesh = setup.mesh
    part = setup.partition
    eta = eta_field(setup, j, k)
    sys = assemble(mesh, setup.sigma, eta)
    mass = mesh.boundary_mass
    omega = np.flatnonzero(part.omega_mask)
    areas_omega = mesh.areas[omega]
    omega_labels = set(range(1, setup.n_cells + 1))

    def apply_forward(gvals: np.ndarray):
        """T g: interior element averages of the Neumann solution (plus the nodal field)."""
        u = solve_neumann(sys, BoundaryTrace(mesh, gvals))
        return element_means(u)[omega], u.values

    def apply_adjoint(fvals_omega: np.ndarray) -> np.ndarray:
        """T* f: boundary trace of the source solve, as hat-basis coefficients."""
        full = np.zeros(mesh.n_elements)
        full[omega] = fvals_omega
        v = solve_source(sys, PiecewiseConstantField(mesh, full), part, omega_labels)
        return v.values[mesh.boundary_nodes]

    _check_adjoint(setup, j, k, mass, areas_omega, apply_forward, apply_adjoint)

    base_scale = math.sqrt(3.0 / part.cell_area(j))
    scale = base_scale if target_scale is None else float(target_scale)
    indicator = (part.labels[omega] == j).astype(float)

    found, best = _cgls_search(
        setup, j, k, mesh, mass, areas_omega, indicator * scale,
        apply_forward, apply_adjoint, max_iter,
    )
    if found is not None:
        return found
    if target_scale is None and best is not None and best[1] > 0.0:
        lift = math.sqrt(1.25 / best[1])
        found, best2 = _cgls_search(
            setup, j, k, mesh, mass, areas_omega, indicator * scale * lift,
            apply_forward, apply_adjoint, max_iter,
        )
        if found is not None:
            return found
        best = best2 if best2 is not None and best2[1] > best[1] else best
    reported = best[1] if best is not None else -math.inf
    raise CertificateError(
        f"no certificate for cell {j}, bracket {k} within {max_iter} CG iterations "
        f"(best beta {reported:.4f}); mesh or partition too coarse"
    )


def _cgls_search(
    setup, j, k, mesh, mass, areas_omega, target,
    apply_forward, apply_adjoint, max_iter,
):
    """One CGLS sweep; returns (accepted current or None, best (norm_sq/beta, beta))."""

    def wdot(x, y):
        return float(np.sum(areas_omega * x * y))

    def mdot(x, y):
        return float(x @ (mass @ y))

    g = np.zeros(mesh.n_boundary)
    u_g = np.zeros(mesh.n_nodes)
    r = target.copy()
    s = apply_adjoint(r)
    p = s.copy()
    gamma = mdot(s, s)
    residuals = [math.sqrt(wdot(r, r))]
    best = None

    for it in range(1, max_iter + 1):
        t_p, u_p = apply_forward(p)
        denom = wdot(t_p, t_p)
        if denom <= 0.0 or gamma <= 0.0:
            break
        alpha = gamma / denom
        g += alpha * p
        u_g += alpha * u_p
        r -= alpha * t_p
        residuals.append(math.sqrt(wdot(r, r)))
        uf = NodalField(mesh, u_g)
        beta = _certificate(setup, j, element_l2_products(uf, uf))
        if beta > 0.0:
            ratio = mdot(g, g) / beta
            if best is None or ratio < best[0]:
                best = (ratio, beta)
        if beta > 1.0:
            current = LocalizedCurrent(
                j, k, BoundaryTrace(mesh, g.copy()), beta, it, np.asarray(residuals)
            )
            return current, best
        s = apply_adjoint(r)
        gamma_new = mdot(s, s)
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new

    return None, best


def _check_adjoint(setup, j, k, mass, areas_omega, apply_forward, apply_adjoint) -> None:
    """Verify <A f, g>_M = <f, A* g>_omega on a fixed random draw before running CG."""
    rng = np.random.default_rng([17, j, k])
    f = rng.standard_normal(areas_omega.size)
    g = rng.standard_normal(setup.mesh.n_boundary)
    af = apply_adjoint(f)
    astar_g, _ = apply_forward(g)
    lhs = float(af @ (mass @ g))
    rhs = float(np.sum(areas_omega * f * astar_g))
    scale = max(abs(lhs), abs(rhs), 1e-300)
    if abs(lhs - rhs) > ADJOINT_RTOL * scale:
        raise CertificateError(
            f"adjoint consistency check failed: relative defect {abs(lhs - rhs) / scale:.3e}"
        )


def verify_localization(
    setup: ProbingSetup,
    current: LocalizedCurrent,
    q: PiecewiseConstantField,
) -> float:
    """Localization gap of an in-bounds absorption field under an accepted current.

    When the current's bracket k matches the bracket of q on cell j, the
    returned value is at least the current's certificate and in particular
    exceeds 1.  q must be piecewise constant on the partition with values in
    [a, b] on the subdomain and zero outside.
    """
    part = setup.partition
    if np.any(q.values[~part.omega_mask] != 0.0):
        raise FieldError("absorption field must vanish outside the subdomain")
    for j in range(1, part.n_cells + 1):
        cell_vals = q.values[part.cell_mask(j)]
        if np.ptp(cell_vals) > 1e-14 * max(abs(cell_vals[0]), 1.0):
            raise FieldError(f"absorption field is not constant on cell {j}")
        if not setup.a <= cell_vals[0] <= setup.b:
            raise FieldError(
                f"cell {j} value {cell_vals[0]:.6g} outside bounds [{setup.a}, {setup.b}]"
            )
    return localization_gap(setup, q, current.g, current.j)


def lipschitz_constant(
    setup: ProbingSetup,
    max_iter: int = DEFAULT_MAX_ITER,
) -> tuple[float, list[LocalizedCurrent]]:
    """Compute all N*K certified currents and L = 1 / max <g, g>_M."""
    currents = []
    for j in range(1, setup.n_cells + 1):
        for k in range(1, setup.K + 1):
            currents.append(find_localized_current(setup, j, k, max_iter=max_iter))
    max_norm_sq = max(c.norm_sq() for c in currents)
    return 1.0 / max_norm_sq, currents


def stability_factor(currents: list[LocalizedCurrent]) -> float:
    """The certified sup-norm stability factor max <g, g>_M (reciprocal of L)."""
    return max(c.norm_sq() for c in currents)


def stability_report(
    setup: ProbingSetup,
    currents: list[LocalizedCurrent],
    n_pairs: int,
    seed: int,
) -> list[dict]:
    """Sample random in-bounds absorption pairs and test the certified inequality.

    Each row records the sup-norm coefficient distance, the M-weighted
    operator-norm distance of the NtD matrices, the certified bound (stability
    factor times the operator-norm distance), and whether the inequality held.
    """
    factor = stability_factor(currents)
    rng = np.random.default_rng(seed)
    part = setup.partition
    rows = []
    lam_cache: dict[tuple, np.ndarray] = {}

    def lam_for(cell_values: np.ndarray) -> np.ndarray:
        key = tuple(np.round(cell_values, 12))
        if key not in lam_cache:
            qf = cell_values_to_field(part, cell_values)
            lam_cache[key] = build_ntd(setup.mesh, setup.sigma, qf).lam
        return lam_cache[key]

    for i in range(n_pairs):
        q1 = rng.uniform(setup.a, setup.b, size=part.n_cells)
        q2 = rng.uniform(setup.a, setup.b, size=part.n_cells)
        if np.max(np.abs(q1 - q2)) == 0.0:
            continue
        dist = float(np.max(np.abs(q1 - q2)))
        opnorm = m_weighted_opnorm(lam_for(q1) - lam_for(q2), setup.mesh.boundary_mass)
        bound = factor * opnorm
        rows.append(
            {
                "pair": i,
                "coeff_distance": dist,
                "ntd_opnorm": opnorm,
                "certified_bound": bound,
                "holds": dist <= bound,
            }
        )
    return rows
