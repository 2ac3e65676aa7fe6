"""Fiber integrals and density fields for projectivized bundle models.

The chain implemented here, bottom to top:

* the induced form on the projectivized dual (`hat_form_matrix`) and the
  volume coefficients of its k-scaled combination with the base form;
* fiber averages of the dual pairing against those coefficient weights
  (`fiber_push_forward`), which produce the level metric on the section
  space (`level_metric_values`);
* weighted Grams (`l2_gram`), the level endomorphism field
  (`bergman_endomorphism`), and two independent density routes
  (`rho_direct` integrates on the total space, `rho_via_trace` contracts
  the endomorphism against a rank-one projector);
* candidate first-correction fields (`a1_formula`, `a1_alternative`), the
  sweep fitter (`expansion_fit`), and the joint linearization of the first
  correction in a metric/form direction (`a11_apply`) together with the
  fourth-order scalar operator it contains (`lichnerowicz_apply`,
  `scalar_curvature_variation`).

Conventions follow the rest of the package: (1,1)-forms are stored as
coefficient matrices against i dz^a wedge dzbar^b, counting measures are
reduced by (2 pi)^m, and a degree-a line-bundle weight has curvature
contraction a.  The fiber trace is the trace on bundle indices; volume
means are taken against the reduced base measure.
"""

import functools
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalGuardError
from .kahler import (
    PerturbedKahler,
    complex_hessian,
    mixed_volume_coefficients,
)
from .metrics import (
    MatrixField,
    curvature_matrix,
    hat_weight,
    hermitian_einstein_residual,
    make_gram,
    mean_curvature,
)
from .quadrature import ChartRule, integrate, radial_profile_rule
from .sections import base_rule, build_section_basis, fiber_rule

logger = logging.getLogger(__name__)

__all__ = [
    "adapted_total_rule",
    "c_r_constant",
    "hat_form_matrix",
    "lifted_base_form",
    "volume_coefficients",
    "level_volume_density",
    "FiberAverage",
    "fiber_push_forward",
    "PushForwardTable",
    "push_forward_table",
    "level_metric_values",
    "l2_gram",
    "BergmanEndomorphism",
    "bergman_endomorphism",
    "bergman_sweep",
    "DirectDensity",
    "rho_direct",
    "dual_point_projector",
    "rho_via_trace",
    "a1_formula",
    "a1_alternative",
    "ExpansionFit",
    "expansion_fit",
    "lichnerowicz_apply",
    "scalar_curvature_variation",
    "curvature_variation",
    "a11_apply",
]


# ---------------------------------------------------------------------------
# fiber volume constant
# ---------------------------------------------------------------------------

def _volume_constant_exact(r):
    """(2 pi)^(r-1) / r!, the closed value of the fiber normalizer."""
    return (2.0 * math.pi) ** (r - 1) / math.factorial(r)


@functools.lru_cache(maxsize=None)
def c_r_constant(r, n_radial=32):
    """Total mass of the unnormalized fiber density: the integral over
    C^(r-1) of (1 + |xi|^2)^(-(r+1)) against the coordinate measure
    prod_j |dxi_j ^ dxibar_j| = 2^(r-1) * Lebesgue.

    Computed by quadrature on the moduli profile.  The closed value is
    (2 pi)^(r-1)/r!; fiber averages elsewhere in this module divide by
    that closed form, so comparing the two calibrates the radial rules.
    """
    if r < 1:
        raise ValueError("rank must be a positive integer")
    if r == 1:
        return 1.0
    u, w = radial_profile_rule(r - 1, n_radial=n_radial)
    vals = (1.0 + u.sum(axis=1)) ** (-(r + 1.0))
    return float(2.0 ** (r - 1) * np.sum(w * vals))


# ---------------------------------------------------------------------------
# induced forms on the projectivized dual
# ---------------------------------------------------------------------------

def _split_points(model, pts):
    pts = np.asarray(pts, dtype=complex)
    if pts.ndim != 2 or pts.shape[1] != model.n:
        raise ValueError(f"total-space points must have shape (n, {model.n})")
    return pts[:, : model.m], pts[:, model.m:]


def hat_form_matrix(metric, model, pts):
    """Coefficient stack (n, d, d) of the curvature form of the induced
    weight on the relative hyperplane line, d = m + r - 1, base directions
    first.  Equals the complex Hessian of log(lam H^{-1} lam*) against the
    affine frame lam = (1, xi); the metric enters through its exact
    derivative tables and the fiber dependence is closed-form.
    """
    z, xi = _split_points(model, pts)
    n = pts.shape[0]
    m = model.m
    d = model.n

    h = metric.matrix(z)
    p = np.linalg.inv(h)
    lam = np.concatenate([np.ones((n, 1), dtype=complex), xi], axis=1)
    u = np.einsum("nij,nj->ni", p, np.conj(lam))
    q = np.einsum("ni,ni->n", lam, u).real

    dh = metric.d_matrix(z)
    dbarh = np.conj(np.swapaxes(dh, -1, -2))
    ddh = metric.dd_matrix(z)
    pdh = np.einsum("nij,najk,nkl->nail", p, dh, p)
    pdbh = np.einsum("nij,nbjk,nkl->nbil", p, dbarh, p)
    dp = -pdh
    ddp = (
        -np.einsum("nij,nabjk,nkl->nabil", p, ddh, p)
        + np.einsum("nbij,najk,nkl->nabil", pdbh, dh, p)
        + np.einsum("naij,nbjk,nkl->nabil", pdh, dbarh, p)
    )

    dplam = np.einsum("ni,naij,nj->na", lam, dp, np.conj(lam))
    ddplam = np.einsum("ni,nabij,nj->nab", lam, ddp, np.conj(lam))
    lamdp = np.einsum("nj,naji->nai", lam, dp)

    w = np.empty((n, d, d), dtype=complex)
    w[:, :m, :m] = (
        ddplam / q[:, None, None]
        - dplam[:, :, None] * np.conj(dplam)[:, None, :] / q[:, None, None] ** 2
    )
    cross = (
        lamdp[:, :, 1:] / q[:, None, None]
        - dplam[:, :, None] * np.conj(u)[:, None, 1:] / q[:, None, None] ** 2
    )
    w[:, :m, m:] = cross
    w[:, m:, :m] = np.conj(np.swapaxes(cross, 1, 2))
    w[:, m:, m:] = (
        p[:, 1:, 1:] / q[:, None, None]
        - u[:, 1:, None] * np.conj(u)[:, None, 1:] / q[:, None, None] ** 2
    )
    return w


def lifted_base_form(kahler, model, pts):
    """Pullback of the base form to the total chart: base block, zero fiber
    block, shape (n, d, d)."""
    z, _ = _split_points(model, pts)
    out = np.zeros((pts.shape[0], model.n, model.n), dtype=complex)
    out[:, : model.m, : model.m] = kahler.matrix(z)
    return out


def volume_coefficients(metric, kahler, model, pts):
    """Coefficients E_j, j = 0..m, of det(W + t Omega) in t, where W is the
    induced form and Omega the lifted base form; shape (m+1, n).  The top
    coefficient factors as det(G) det(W_fib) and carries the leading
    measure; the ratios E_j/E_m weight the fiber averages."""
    w = hat_form_matrix(metric, model, pts)
    om = lifted_base_form(kahler, model, pts)
    return mixed_volume_coefficients(w, om, model.m)


def level_volume_density(metric, kahler, model, pts, k=None):
    """Reduced counting measure of the k-scaled combined form against the
    coordinate Lebesgue measure on the total chart:

        2^n (2 pi)^{-m} sum_j k^(j-m) E_j.

    At k -> infinity this tends to the product of the reduced base density
    and the fiber volume form."""
    if k is None:
        k = model.k
    e = volume_coefficients(metric, kahler, model, pts)
    kpow = float(k) ** (np.arange(model.m + 1.0) - model.m)
    dens = 2.0**model.n / (2.0 * math.pi) ** model.m * np.einsum("j,jn->n", kpow, e)
    if not np.all(np.isfinite(dens)) or np.any(dens <= 0.0):
        raise NumericalGuardError(
            "volume density must be positive and finite on the chart; "
            "the metric data is degenerate at some node"
        )
    return dens


# ---------------------------------------------------------------------------
# fiber averages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FiberAverage:
    """One fiber integral of the dual pairing: `g_tilde` is the raw
    metric-valued average, `psi` the same data measured against the input
    metric (H^{-1} g_tilde)."""

    g_tilde: np.ndarray
    psi: np.ndarray


@dataclass(frozen=True)
class PushForwardTable:
    """All coefficient-weighted fiber averages at once, k-independent.

    m_tilde[j] is the E_j/E_m-weighted average, shape (n, r, r); the level
    metric at any k is sum_j k^(j-m) m_tilde[j].  psi[j] = H^{-1} m_tilde[j],
    so psi[m] is the identity up to quadrature error."""

    points: np.ndarray
    m_tilde: np.ndarray
    psi: np.ndarray


def _fiber_nodes(model, rule):
    rule = rule if rule is not None else fiber_rule(model)
    if rule.dim != model.fiber_dim:
        raise ValueError(
            f"fiber rule has dimension {rule.dim}, expected {model.fiber_dim}")
    return rule


def _adapted_fiber_points(metric, model, z, xi):
    """Fiber nodes pulled back through the metric-adapted affine frame.

    The dual pairing at base point z is a Hermitian quadratic in xi whose
    decay scale degenerates where the metric does; completing the square,
    q(xi) = kappa (1 + |w|^2) for the affine change xi = xi0 + sqrt(kappa)
    w L^{-1} (Schur complement kappa, Cholesky factor L of the fiber block
    of H^{-1}).  Pulling quadrature nodes through that change keeps the
    integrand scale uniform over the base.

    Returns total points (nb*nf, n) and the squared Jacobian factor (nb,).
    """
    nb, nf = z.shape[0], xi.shape[0]
    pts = np.empty((nb * nf, model.n), dtype=complex)
    pts[:, : model.m] = np.repeat(z, nf, axis=0)
    if model.r == 1:
        return pts, np.ones(nb)
    p = metric.inverse(z)
    b = p[:, 1:, 0]
    bmat = p[:, 1:, 1:]
    y = np.linalg.solve(bmat, b[..., None])[..., 0]
    kappa = (p[:, 0, 0] - np.einsum("nc,nc->n", np.conj(b), y)).real
    xi0 = -np.conj(y)
    linv = np.linalg.inv(np.linalg.cholesky(bmat))
    moved = xi0[:, None, :] + np.sqrt(kappa)[:, None, None] * np.einsum(
        "fc,ncd->nfd", xi, linv)
    pts[:, model.m:] = moved.reshape(nb * nf, model.r - 1)
    jac2 = kappa ** (model.r - 1) / np.linalg.det(bmat).real
    return pts, jac2


def adapted_total_rule(metric, model, n_radial=24, n_angular=None):
    """Quadrature on the total chart with the fiber factor in the
    metric-adapted frame at each base node.  Use this instead of the plain
    tensor rule whenever the integrand sees the dual pairing; the plain
    rule loses accuracy where the fiber decay scale shrinks."""
    rb = base_rule(model, n_radial, n_angular)
    rf = fiber_rule(model, n_radial, n_angular)
    pts, jac2 = _adapted_fiber_points(metric, model, rb.points, rf.points)
    w = (rb.weights[:, None] * rf.weights[None, :] * jac2[:, None]).ravel()
    return ChartRule(pts, w)


def _fiber_geometry(metric, model, pts):
    """Dual pairing q, its rank-one kernel data, and the fiber volume
    factor det(W_fib) at total points."""
    z, xi = _split_points(model, pts)
    n = pts.shape[0]
    lam = np.concatenate([np.ones((n, 1), dtype=complex), xi], axis=1)
    p = metric.inverse(z)
    u = np.einsum("nij,nj->ni", p, np.conj(lam))
    q = np.einsum("ni,ni->n", lam, u).real
    wfib = (
        p[:, 1:, 1:] / q[:, None, None]
        - u[:, 1:, None] * np.conj(u)[:, None, 1:] / q[:, None, None] ** 2
    )
    detwf = np.linalg.det(wfib).real
    pairing = np.einsum("na,nb->nab", np.conj(lam), lam)
    return q, detwf, pairing


def push_forward_table(metric, kahler, model, z, rule=None):
    """Fiber averages of the dual pairing against every volume-coefficient
    weight f_j = E_j/E_m, for base points z."""
    z = np.asarray(z, dtype=complex)
    rule = _fiber_nodes(model, rule)
    m, r = model.m, model.r
    nb, nf = z.shape[0], rule.points.shape[0]
    pts, jac2 = _adapted_fiber_points(metric, model, z, rule.points)

    w = hat_form_matrix(metric, model, pts)
    om = lifted_base_form(kahler, model, pts)
    e = mixed_volume_coefficients(w, om, m).reshape(m + 1, nb, nf)
    f = e / e[m]

    q, detwf, pairing = _fiber_geometry(metric, model, pts)
    meas = (detwf / q).reshape(nb, nf) * 2.0 ** (r - 1) \
        * rule.weights[None, :] * jac2[:, None] / _volume_constant_exact(r)
    m_tilde = np.einsum("jnf,nf,nfab->jnab", f, meas, pairing.reshape(nb, nf, r, r))
    h = metric.matrix(z)
    psi = np.stack([np.linalg.solve(h, m_tilde[j]) for j in range(m + 1)])
    return PushForwardTable(points=z, m_tilde=m_tilde, psi=psi)


def fiber_push_forward(metric, kahler, model, z, weight=None, rule=None):
    """One fiber average.  weight None integrates the bare dual pairing,
    returning the bundle metric itself up to quadrature error; weight j in
    0..m uses the volume-coefficient ratio E_j/E_m."""
    z = np.asarray(z, dtype=complex)
    rule = _fiber_nodes(model, rule)
    r = model.r

    if weight is not None:
        if not 0 <= weight <= model.m:
            raise ValueError(f"weight index {weight} outside 0..{model.m}")
        table = push_forward_table(metric, kahler, model, z, rule=rule)
        return FiberAverage(g_tilde=table.m_tilde[weight], psi=table.psi[weight])

    nb, nf = z.shape[0], rule.points.shape[0]
    pts, jac2 = _adapted_fiber_points(metric, model, z, rule.points)
    q, detwf, pairing = _fiber_geometry(metric, model, pts)
    meas = (detwf / q).reshape(nb, nf) * 2.0 ** (r - 1) \
        * rule.weights[None, :] * jac2[:, None] / _volume_constant_exact(r)
    g_tilde = np.einsum("nf,nfab->nab", meas, pairing.reshape(nb, nf, r, r))
    return FiberAverage(g_tilde=g_tilde, psi=np.linalg.solve(metric.matrix(z), g_tilde))


def level_metric_values(metric, kahler, model, z, k=None, rule=None, table=None):
    """Level metric on the section space at base points:
    sum_j k^(j-m) m_tilde[j], shape (n, r, r)."""
    if k is None:
        k = model.k
    if table is None:
        table = push_forward_table(metric, kahler, model, z, rule=rule)
    kpow = float(k) ** (np.arange(model.m + 1.0) - model.m)
    return np.einsum("j,jnab->nab", kpow, table.m_tilde)


# ---------------------------------------------------------------------------
# Grams
# ---------------------------------------------------------------------------

def l2_gram(basis, rule, weight, metric_values=None):
    """Weighted Gram of a section basis.

    With `metric_values` (a stack (n, r, r) over the rule nodes) the pairing
    is s_i^* H s_j against component tables on the base chart; without it,
    scalar embedding values on the total chart are paired directly, and any
    fiber weight must already be folded into `weight`.
    """
    weight = np.asarray(weight, dtype=float)
    wq = rule.weights * weight
    if metric_values is None:
        v = basis.eval_embedding(rule.points)
        g = np.einsum("n,ni,nj->ij", wq, np.conj(v), v)
    else:
        c = basis.eval_components(rule.points)
        g = np.einsum("n,nia,nab,njb->ij", wq, np.conj(c), metric_values, c)
    if not np.all(np.isfinite(g)):
        raise NumericalGuardError(
            "Gram entries are not finite; the quadrature weight blew up")
    return make_gram(g)


# ---------------------------------------------------------------------------
# level endomorphism
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BergmanEndomorphism:
    """Reproducing-kernel endomorphism field at one twist level.

    endomorphism(z) returns sum_i s_i (s_i)^* with the sections
    orthonormalized for the level Gram and dualized against the plain
    metric with the degree-k weight; it is self-adjoint for the bundle
    metric."""

    model: object
    k: int
    basis: object
    gram: object
    gram_inverse: np.ndarray
    metric: object
    kahler: object

    def endomorphism(self, z):
        z = np.asarray(z, dtype=complex)
        comps = self.basis.eval_components(z)
        h = self.metric.matrix(z)
        bx = np.einsum("pq,npa,nqb->nab", self.gram_inverse, comps, np.conj(comps))
        scale = np.exp(-float(self.k) * self.kahler.potential(z))
        return np.einsum("nab,nbc->nac", bx, h) * scale[:, None, None]


def bergman_endomorphism(metric, kahler, model, rule=None, fiber=None, table=None,
                         guard=1e12):
    """Assemble the level endomorphism for `model.k`.

    The Gram weights sections by the level metric (the fiber data pushed to
    the base), the degree-k potential weight, and the reduced base volume;
    the orthonormalization guard trips when the Gram condition number
    exceeds `guard`.
    """
    rule = rule if rule is not None else base_rule(model)
    fiber = fiber if fiber is not None else fiber_rule(model)
    if table is None:
        table = push_forward_table(metric, kahler, model, rule.points, rule=fiber)
    elif not np.array_equal(table.points, rule.points):
        raise ValueError("push-forward table nodes differ from the base rule nodes")

    k = model.k
    hk = level_metric_values(metric, kahler, model, rule.points, k=k, table=table)
    weight = np.exp(-float(k) * kahler.potential(rule.points)) \
        * kahler.reduced_volume_density(rule.points)
    basis = build_section_basis(model)
    gram = l2_gram(basis, rule, weight, metric_values=hk)
    t = gram.whitener(guard=guard)
    logger.debug("level endomorphism %s k=%d: N=%d, Gram condition %.3e",
                 model.label, k, basis.count, gram.condition())
    return BergmanEndomorphism(
        model=model, k=k, basis=basis, gram=gram, gram_inverse=t @ t.conj().T,
        metric=metric, kahler=kahler)


def bergman_sweep(metric, kahler, model, ks, rule=None, fiber=None, guard=1e12):
    """Level endomorphisms across a twist grid, sharing the quadrature
    rules and the k-independent push-forward table."""
    rule = rule if rule is not None else base_rule(model)
    fiber = fiber if fiber is not None else fiber_rule(model)
    table = push_forward_table(metric, kahler, model, rule.points, rule=fiber)
    out = []
    for k in ks:
        level = replace(model, k=int(k))
        out.append(bergman_endomorphism(
            metric, kahler, level, rule=rule, fiber=fiber, table=table, guard=guard))
    return out


# ---------------------------------------------------------------------------
# density, two routes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DirectDensity:
    """Squared-norm sum of an orthonormalized section basis on the total
    space, against the induced hyperplane weight at the twist level."""

    model: object
    basis: object
    gram: object
    gram_inverse: np.ndarray
    metric: object
    kahler: object
    rule: object

    def density(self, pts):
        pts = np.asarray(pts, dtype=complex)
        v = self.basis.eval_embedding(pts)
        raw = np.einsum("np,pq,nq->n", v, self.gram_inverse, np.conj(v)).real
        z = pts[:, : self.model.m]
        scale = hat_weight(self.metric, pts, self.model) \
            * np.exp(-float(self.model.k) * self.kahler.potential(z))
        return raw * scale

    def measure_density(self, pts):
        return level_volume_density(self.metric, self.kahler, self.model, pts)

    def total_mass(self):
        dens = self.measure_density(self.rule.points)
        return float(integrate(self.rule, self.density(self.rule.points) * dens))

    def volume(self):
        return float(integrate(self.rule, self.measure_density(self.rule.points)))


def rho_direct(metric, kahler, model, rule=None, guard=1e12):
    """Density route that never touches the fiber push-forward: Gram and
    evaluation both live on the total chart with the induced hyperplane
    weight and the level counting measure."""
    rule = rule if rule is not None else adapted_total_rule(metric, model)
    basis = build_section_basis(model)
    dens = level_volume_density(metric, kahler, model, rule.points)
    z = rule.points[:, : model.m]
    weight = dens * hat_weight(metric, rule.points, model) \
        * np.exp(-float(model.k) * kahler.potential(z))
    gram = l2_gram(basis, rule, weight)
    t = gram.whitener(guard=guard)
    logger.debug("direct density %s: N=%d, Gram condition %.3e",
                 model.label, basis.count, gram.condition())
    return DirectDensity(model=model, basis=basis, gram=gram,
                         gram_inverse=t @ t.conj().T, metric=metric,
                         kahler=kahler, rule=rule)


def dual_point_projector(metric, z, lam):
    """Rank-one field of the dual pairing: at covector lam over z, the
    projector (u lam) / (lam u) with u = H^{-1} lam*.  Trace one,
    idempotent, self-adjoint for the metric, and invariant under rescaling
    of lam."""
    z = np.asarray(z, dtype=complex)
    lam = np.asarray(lam, dtype=complex)
    if np.any(np.max(np.abs(lam), axis=1) == 0.0):
        raise ValueError("zero covector has no dual point")
    u = np.einsum("nij,nj->ni", metric.inverse(z), np.conj(lam))
    q = np.einsum("ni,ni->n", lam, u).real
    return np.einsum("na,nb->nab", u, lam) / q[:, None, None]


def rho_via_trace(bergman, pts):
    """Density through the base-level endomorphism: contract against the
    dual point projector and divide by the rank constant."""
    model = bergman.model
    pts = np.asarray(pts, dtype=complex)
    z, xi = _split_points(model, pts)
    lam = np.concatenate([np.ones((pts.shape[0], 1), dtype=complex), xi], axis=1)
    proj = dual_point_projector(bergman.metric, z, lam)
    b = bergman.endomorphism(z)
    return np.einsum("nab,nba->n", proj, b).real / _volume_constant_exact(model.r)


# ---------------------------------------------------------------------------
# first-correction candidates
# ---------------------------------------------------------------------------

def a1_formula(metric, kahler, z):
    """Displayed first-correction combination: trace-free mean curvature
    plus ((r+1)/2r) S times the identity, shape (n, r, r)."""
    z = np.asarray(z, dtype=complex)
    r = metric.r
    mc = mean_curvature(metric, kahler, z)
    s = kahler.scalar_curvature(z)
    tr = np.einsum("naa->n", mc)
    eye = np.eye(r)
    return (mc - (tr / r)[:, None, None] * eye
            + ((r + 1.0) / (2.0 * r)) * s[:, None, None] * eye)


def a1_alternative(metric, kahler, model, z, rule=None):
    """First correction realized by the level construction: mean curvature
    plus (S/2) I, minus the subleading fiber average psi_{m-1}."""
    if model.m == 0:
        raise ValueError("needs a positive-dimensional base")
    z = np.asarray(z, dtype=complex)
    mc = mean_curvature(metric, kahler, z)
    s = kahler.scalar_curvature(z)
    sub = fiber_push_forward(metric, kahler, model, z, weight=model.m - 1, rule=rule)
    return mc + 0.5 * s[:, None, None] * np.eye(metric.r) - sub.psi


# ---------------------------------------------------------------------------
# expansion fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExpansionFit:
    """Least-squares correction coefficients of a level sweep.

    The leading k^m identity term is pinned, not fitted; coefficients[i-1]
    estimates the k^(m-i) coefficient at each point.  residuals[j] is the
    sup-norm defect at level ks[j] and residual_slope its log-log rate."""

    ks: np.ndarray
    points: np.ndarray
    coefficients: np.ndarray
    residuals: np.ndarray
    residual_slope: float


def expansion_fit(sweep, points, orders=2):
    """Fit sum_i A_i k^(m-i), i = 1..orders-1, to a sweep of level
    endomorphisms after subtracting the pinned k^m identity term."""
    sweep = sorted(sweep, key=lambda b: b.k)
    ks = np.array([b.k for b in sweep], dtype=float)
    if len(ks) < 3:
        raise ValueError("expansion grid needs at least 3 levels")
    if len(np.unique(ks)) != len(ks):
        raise ValueError("expansion grid has repeated levels")
    if orders < 2 or orders > len(ks):
        raise ValueError("orders must be between 2 and the number of levels")

    points = np.asarray(points, dtype=complex)
    m, r = sweep[0].model.m, sweep[0].model.r
    vals = np.stack([b.endomorphism(points) for b in sweep])
    y = vals - ks[:, None, None, None] ** m * np.eye(r)

    design = ks[:, None] ** (m - np.arange(1, orders)[None, :])
    coef, *_ = np.linalg.lstsq(design, y.reshape(len(ks), -1), rcond=None)
    resid = y - (design @ coef).reshape(y.shape)
    residuals = np.max(np.abs(resid).reshape(len(ks), -1), axis=1)
    slope = float(np.polyfit(np.log(ks), np.log(np.maximum(residuals, 1e-16)), 1)[0])
    logger.debug("expansion fit: %d levels, orders=%d, residual slope %.3f",
                 len(ks), orders, slope)
    return ExpansionFit(
        ks=ks, points=points,
        coefficients=coef.reshape(orders - 1, points.shape[0], r, r),
        residuals=residuals, residual_slope=slope)


# ---------------------------------------------------------------------------
# fourth-order operator and the joint linearization
# ---------------------------------------------------------------------------

def lichnerowicz_apply(kahler, eta_fn, z, t=1e-3):
    """Derivative of the scalar curvature along the potential deformation
    phi -> phi - t eta, by Richardson-extrapolated central differences in
    t.  This is the defining route; `scalar_curvature_variation` realizes
    the same operator through its expanded terms."""
    z = np.asarray(z, dtype=complex)

    def s_at(tv):
        return PerturbedKahler(kahler, eta_fn, tv).scalar_curvature(z)

    d1 = (s_at(t) - s_at(-t)) / (2.0 * t)
    d2 = (s_at(0.5 * t) - s_at(-0.5 * t)) / t
    return (4.0 * d2 - d1) / 3.0


def scalar_curvature_variation(kahler, eta_fn, z, h=2e-2, h_outer=4e-2):
    """Expanded form of the scalar-curvature derivative along -t eta:

        Delta(Delta eta) + tr(G^{-1} Hess(eta) G^{-1} Ric).

    Linear in eta by construction, unlike the difference-quotient route,
    which picks up quadratic truncation terms.  The inner step is kept
    deliberately coarse: the outer stencil amplifies pointwise noise by
    h_outer^{-2}, and inner truncation error (linear in eta) is far less
    damaging than inner roundoff (not)."""
    z = np.asarray(z, dtype=complex)
    g = kahler.matrix(z)
    ginv = np.linalg.inv(g)

    def laplacian(q):
        gq = kahler.matrix(np.asarray(q, dtype=complex))
        hess = complex_hessian(eta_fn, q, h=h)
        return np.einsum("nba,nab->n", np.linalg.inv(gq), hess).real

    lap2 = complex_hessian(laplacian, z, h=h_outer)
    term1 = np.einsum("nba,nab->n", ginv, lap2).real
    hess = complex_hessian(eta_fn, z, h=h)
    ric = kahler.ricci_matrix(z)
    term2 = np.einsum("nab,nbc,ncd,nda->n", ginv, hess, ginv, ric).real
    return term1 + term2


def curvature_variation(metric, kfield, z):
    """Derivative of the curvature form for H_t = H + t K, K a pointwise
    Hermitian matrix field; shape (n, m, m, r, r), in the convention of
    `curvature_matrix`."""
    z = np.asarray(z, dtype=complex)
    h = metric.matrix(z)
    hinv = np.linalg.inv(h)
    dh = metric.d_matrix(z)
    dbarh = np.conj(np.swapaxes(dh, -1, -2))
    ddh = metric.dd_matrix(z)
    k0 = kfield.matrix(z)
    dk = kfield.d_matrix(z)
    dbark = np.conj(np.swapaxes(dk, -1, -2))
    ddk = kfield.dd_matrix(z)

    pk = np.einsum("nij,njk->nik", hinv, k0)
    pdh = np.einsum("nij,najk->naik", hinv, dh)
    pdbh = np.einsum("nij,nbjk->nbik", hinv, dbarh)
    pdk = np.einsum("nij,najk->naik", hinv, dk)
    pdbk = np.einsum("nij,nbjk->nbik", hinv, dbark)
    pddh = np.einsum("nij,nabjk->nabik", hinv, ddh)
    pddk = np.einsum("nij,nabjk->nabik", hinv, ddk)

    return (
        -np.einsum("nij,nbjk,nakl->nabil", pk, pdbh, pdh)
        + np.einsum("nbij,najk->nabik", pdbk, pdh)
        - np.einsum("nbij,njk,nakl->nabil", pdbh, pk, pdh)
        + np.einsum("nbij,najk->nabik", pdbh, pdk)
        + np.einsum("nij,nabjk->nabik", pk, pddh)
        - pddk
    )


def a11_apply(metric, kahler, model, phi_field, eta_fn, z, rule=None, he_tol=1e-6):
    """Joint linearization of the displayed first correction in the
    direction (h -> h(1 + t phi), omega -> omega - t i ddbar eta):

        tracefree(delta M) + ((r+1)/2r) (delta S) I

    with delta M the mean-curvature variation (curvature part through the
    exact six-term expansion, contraction part through the form direction)
    and delta S from `scalar_curvature_variation`.  Linear in (phi, eta).

    Preconditions, each reported by name when violated: phi self-adjoint
    for the metric with volume-mean-free trace, eta with zero volume mean,
    the metric Hermite-Einstein to `he_tol`, and constant scalar curvature.
    """
    z = np.asarray(z, dtype=complex)
    rule = rule if rule is not None else base_rule(model)
    zq = rule.points
    dens = kahler.reduced_volume_density(zq)
    vol = integrate(rule, dens)

    problems = []
    phi_vals = phi_field.matrix(zq)
    h_vals = metric.matrix(zq)
    hphi = np.einsum("nab,nbc->nac", h_vals, phi_vals)
    defect = np.max(np.abs(hphi - np.conj(np.swapaxes(hphi, 1, 2)))) \
        if hphi.size else 0.0
    scale = max(float(np.max(np.abs(phi_vals))), 1.0) if phi_vals.size else 1.0
    if defect > 1e-8 * scale:
        problems.append(f"phi is not metric-self-adjoint (defect {defect:.2e})")
    tr_mean = integrate(rule, np.einsum("naa->n", phi_vals).real * dens) / vol
    if abs(tr_mean) > 1e-8 * scale:
        problems.append(f"volume mean of tr(phi) is {tr_mean:.2e}, want 0")
    eta_mean = integrate(rule, np.asarray(eta_fn(zq), dtype=float) * dens) / vol
    if abs(eta_mean) > 1e-8:
        problems.append(f"volume mean of eta is {eta_mean:.2e}, want 0")
    he = hermitian_einstein_residual(metric, kahler, rule)
    if he > he_tol:
        problems.append(
            f"Hermite-Einstein residual {he:.2e} exceeds {he_tol:g}")
    s_vals = kahler.scalar_curvature(zq)
    spread = float(np.max(s_vals) - np.min(s_vals))
    if spread > 1e-6 * (1.0 + abs(float(np.mean(s_vals)))):
        problems.append(f"scalar curvature is not constant (spread {spread:.2e})")
    if problems:
        raise ValueError(
            "linearization preconditions violated: " + "; ".join(problems))

    r = metric.r
    kfield = MatrixField(
        model.m, r,
        fn=lambda q: np.einsum(
            "nab,nbc->nac", metric.matrix(np.asarray(q, dtype=complex)),
            phi_field.matrix(np.asarray(q, dtype=complex))),
        label="metric direction")

    df = curvature_variation(metric, kfield, z)
    g = kahler.matrix(z)
    ginv = np.linalg.inv(g)
    f = np.asarray(curvature_matrix(metric, z))
    hess_eta = complex_hessian(eta_fn, z)
    # delta of the contraction: Lambda(i delta F) plus the derivative of
    # Lambda itself along delta G = -Hess(eta)
    delta_m = (np.einsum("nba,nabij->nij", ginv, df)
               + np.einsum("nbc,ncd,nda,nabij->nij", ginv, hess_eta, ginv, f))
    tr = np.einsum("naa->n", delta_m)
    eye = np.eye(r)
    ds = scalar_curvature_variation(kahler, eta_fn, z)
    return (delta_m - (tr / r)[:, None, None] * eye
            + ((r + 1.0) / (2.0 * r)) * ds[:, None, None] * eye)
