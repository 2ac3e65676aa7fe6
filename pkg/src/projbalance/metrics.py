"""Bundle metrics, their curvature, induced Fubini-Study data, Gram tools.

A bundle metric is an r x r positive Hermitian matrix field H(z) on the base
chart, with pairing <u, v>_h = v* H u.  Curvature follows the Chern
convention

    F_ab = H^{-1}(dbar_b H) H^{-1}(d_a H) - H^{-1}(d_a dbar_b H),

stored as the coefficient stack of the (1,1)-form iF in the package-wide
convention (see kahler module docstring), so the split metric
diag((1+|z|^2)^{-a}) contracts against the Fubini-Study form to the integer
slope a on the projective line.

Derivative tables are hand-coded for the built-in families and generic
central differences otherwise; the perturbed family propagates exact
derivatives through the sum rule.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalGuardError
from .kahler import complex_gradient, complex_hessian, lambda_contract

logger = logging.getLogger(__name__)

__all__ = [
    "GramMatrix",
    "make_gram",
    "whitening_transform",
    "MatrixField",
    "BundleMetricField",
    "ConstantBundleMetric",
    "SplitBundleMetric",
    "PerturbedBundleMetric",
    "CallableBundleMetric",
    "curvature_matrix",
    "mean_curvature",
    "CurvatureField",
    "curvature",
    "hermitian_einstein_residual",
    "hat_weight",
    "hat_weight_homogeneous",
    "InducedFSMetric",
    "fs_from_gram",
]


# ---------------------------------------------------------------------------
# Gram matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GramMatrix:
    """Hermitian positive definite inner-product matrix on a section space."""

    matrix: np.ndarray

    @property
    def n(self):
        return self.matrix.shape[0]

    def smallest_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def condition(self):
        ev = np.linalg.eigvalsh(self.matrix)
        return float(ev[-1] / ev[0]) if ev[0] > 0 else math.inf

    def whitener(self, guard=1e12):
        return whitening_transform(self.matrix, guard=guard)


def make_gram(a, hermitian_tol=1e-10):
    a = np.asarray(a, dtype=complex)
    scale = max(np.max(np.abs(a)), 1.0)
    defect = np.max(np.abs(a - a.conj().T))
    if defect > hermitian_tol * scale:
        raise ValueError(f"Gram matrix not Hermitian (defect {defect:.2e})")
    return GramMatrix(0.5 * (a + a.conj().T))


def whitening_transform(gram, guard=1e12):
    """T with T* G T = I, via Cholesky G = L L* and T = L^{-*}.

    Guards: eigenvalues must be positive and the condition number below
    `guard`; otherwise the Gram cannot be trusted at this node budget.
    """
    g = gram.matrix if isinstance(gram, GramMatrix) else np.asarray(gram, dtype=complex)
    ev = np.linalg.eigvalsh(g)
    if ev[0] <= 0:
        raise NumericalGuardError(
            f"Gram not positive definite (smallest eigenvalue {ev[0]:.3e})"
        )
    cond = ev[-1] / ev[0]
    if cond > guard:
        raise NumericalGuardError(
            f"Gram condition number {cond:.3e} exceeds {guard:.1e}; "
            "increase the quadrature budget or lower k"
        )
    try:
        ell = np.linalg.cholesky(g)
        t = np.linalg.inv(ell).conj().T
    except np.linalg.LinAlgError:
        # borderline roundoff despite positive spectrum: eigen route
        w, u = np.linalg.eigh(g)
        t = u / np.sqrt(w)[None, :]
    return t


# ---------------------------------------------------------------------------
# matrix fields and bundle metrics
# ---------------------------------------------------------------------------

class MatrixField:
    """r x r matrix field on an m-dimensional base chart.

    Base-class derivatives are generic Richardson central differences of
    matrix(); subclasses with closed forms override d_matrix/dd_matrix.
    Index conventions: d_matrix (n, m, r, r) holds d_a K, dd_matrix
    (n, m, m, r, r) holds d_a dbar_b K.
    """

    def __init__(self, m, r, fn=None, label="field", fd_step=5e-3):
        self.m = m
        self.r = r
        self._fn = fn
        self.label = label
        self.fd_step = fd_step

    def matrix(self, z):
        if self._fn is None:
            raise NotImplementedError
        return np.asarray(self._fn(np.asarray(z, dtype=complex)), dtype=complex)

    def d_matrix(self, z):
        z = np.asarray(z, dtype=complex)
        if self.m == 0:
            return np.zeros((z.shape[0], 0, self.r, self.r), dtype=complex)
        return complex_gradient(self.matrix, z, h=self.fd_step)

    def dd_matrix(self, z):
        z = np.asarray(z, dtype=complex)
        if self.m == 0:
            return np.zeros((z.shape[0], 0, 0, self.r, self.r), dtype=complex)
        return complex_hessian(self.matrix, z, h=self.fd_step)


class BundleMetricField(MatrixField):
    """Positive Hermitian matrix field: a metric on a rank-r bundle."""

    def inverse(self, z):
        h = self.matrix(z)
        det = np.linalg.det(h)
        if np.any(np.abs(det) < 1e-300) or not np.all(np.isfinite(det)):
            raise ValueError(f"{self.label}: singular metric at a node")
        return np.linalg.inv(h)


class ConstantBundleMetric(BundleMetricField):
    def __init__(self, m, h, label="constant"):
        h = np.asarray(h, dtype=complex)
        super().__init__(m, h.shape[0], label=label)
        self.h = 0.5 * (h + h.conj().T)

    def matrix(self, z):
        n = np.asarray(z).shape[0]
        return np.broadcast_to(self.h, (n, self.r, self.r)).copy()

    def d_matrix(self, z):
        n = np.asarray(z).shape[0]
        return np.zeros((n, self.m, self.r, self.r), dtype=complex)

    def dd_matrix(self, z):
        n = np.asarray(z).shape[0]
        return np.zeros((n, self.m, self.m, self.r, self.r), dtype=complex)


class SplitBundleMetric(BundleMetricField):
    """diag((1+|z|^2)^{-a_alpha}): the standard homogeneous metric on a sum
    of degree-a_alpha line bundles over P^m.  All derivatives closed-form."""

    def __init__(self, m, degrees):
        degrees = tuple(int(a) for a in degrees)
        super().__init__(m, len(degrees), label=f"split{degrees}")
        self.degrees = degrees
        self._a = np.array(degrees, dtype=float)

    def _q(self, z):
        return 1.0 + np.sum(np.abs(z) ** 2, axis=1)

    def matrix(self, z):
        z = np.asarray(z, dtype=complex)
        q = self._q(z)
        diag = q[:, None] ** (-self._a[None, :])
        out = np.zeros((z.shape[0], self.r, self.r), dtype=complex)
        out[:, np.arange(self.r), np.arange(self.r)] = diag
        return out

    def d_matrix(self, z):
        # d_a (q^-p) = -p q^(-p-1) zbar_a
        z = np.asarray(z, dtype=complex)
        q = self._q(z)
        diag = (-self._a[None, None, :]
                * q[:, None, None] ** (-self._a[None, None, :] - 1.0)
                * np.conj(z)[:, :, None])
        out = np.zeros((z.shape[0], self.m, self.r, self.r), dtype=complex)
        idx = np.arange(self.r)
        out[:, :, idx, idx] = diag
        return out

    def dd_matrix(self, z):
        # d_a dbar_b (q^-p) = p(p+1) q^(-p-2) zbar_a z_b - p q^(-p-1) delta_ab
        z = np.asarray(z, dtype=complex)
        q = self._q(z)
        p = self._a[None, None, None, :]
        qq = q[:, None, None, None]
        zb_a = np.conj(z)[:, :, None, None]
        z_b = z[:, None, :, None]
        dia = np.eye(self.m)[None, :, :, None]
        diag = p * (p + 1.0) * qq ** (-p - 2.0) * zb_a * z_b - p * qq ** (-p - 1.0) * dia
        out = np.zeros((z.shape[0], self.m, self.m, self.r, self.r), dtype=complex)
        idx = np.arange(self.r)
        out[:, :, :, idx, idx] = diag
        return out

    def mean_slope(self):
        return float(np.mean(self._a))


class PerturbedBundleMetric(BundleMetricField):
    """H_t = H_0 + t K for a Hermitian matrix field K; derivatives propagate
    exactly through the sum rule, so exact inputs stay exact."""

    def __init__(self, base, field, t):
        if base.r != field.r or base.m != field.m:
            raise ValueError("base metric and perturbation field shapes differ")
        super().__init__(base.m, base.r, label=f"{base.label}+{t:g}*{field.label}")
        self.base = base
        self.field = field
        self.t = float(t)

    def matrix(self, z):
        return self.base.matrix(z) + self.t * self.field.matrix(z)

    def d_matrix(self, z):
        return self.base.d_matrix(z) + self.t * self.field.d_matrix(z)

    def dd_matrix(self, z):
        return self.base.dd_matrix(z) + self.t * self.field.dd_matrix(z)


class CallableBundleMetric(BundleMetricField):
    """Metric from a plain closure; all derivatives generic FD."""

    def __init__(self, m, r, fn, label="callable", fd_step=5e-3):
        super().__init__(m, r, fn=fn, label=label, fd_step=fd_step)


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------

def curvature_matrix(metric, z):
    """Coefficient stack (n, m, m, r, r) of the (1,1)-form iF in the
    package convention; entry [n, a, b] is the matrix attached to
    dz^a wedge dzbar^b."""
    z = np.asarray(z, dtype=complex)
    h = metric.matrix(z)
    hinv = np.linalg.inv(h)
    dh = metric.d_matrix(z)                              # (n, m, r, r)
    dbarh = np.conj(np.swapaxes(dh, -1, -2))             # (d_b H)^* = dbar_b H
    ddh = metric.dd_matrix(z)                            # (n, m, m, r, r)
    term1 = np.einsum("nip,nbpq,nqs,nasl->nabil", hinv, dbarh, hinv, dh)
    term2 = np.einsum("nip,nabpl->nabil", hinv, ddh)
    return term1 - term2


def mean_curvature(metric, kahler, z):
    """Contraction of iF against the Kahler form: (n, r, r), self-adjoint
    with respect to the metric."""
    z = np.asarray(z, dtype=complex)
    g = kahler.matrix(z)
    return lambda_contract(g, curvature_matrix(metric, z))


@dataclass(frozen=True)
class CurvatureField:
    points: np.ndarray
    form: np.ndarray       # (n, m, m, r, r) stack of iF
    mean: np.ndarray       # (n, r, r) contraction against the Kahler form
    hermiticity_defect: float


def curvature(metric, kahler, z):
    z = np.asarray(z, dtype=complex)
    form = curvature_matrix(metric, z)
    g = kahler.matrix(z)
    mean = lambda_contract(g, form)
    h = metric.matrix(z)
    pairing = np.einsum("nij,njk->nik", h, mean)
    defect = float(np.max(np.abs(pairing - np.conj(np.swapaxes(pairing, 1, 2))))) \
        if mean.size else 0.0
    return CurvatureField(z, form, mean, defect)


def hermitian_einstein_residual(metric, kahler, rule):
    """Worst-node operator norm of (mean curvature - slope * I), with the
    slope estimated from the data: the volume-average of tr(mean)/r.

    Zero exactly when the metric satisfies the constant-contraction equation
    for this Kahler form.
    """
    from .quadrature import integrate

    pts = rule.points
    mc = mean_curvature(metric, kahler, pts)
    if mc.shape[-1] == 0 or pts.shape[0] == 0:
        return 0.0
    dens = kahler.reduced_volume_density(pts)
    vol = integrate(rule, dens)
    trace = np.einsum("nii->n", mc).real
    slope = integrate(rule, trace * dens) / (metric.r * vol)
    h = metric.matrix(pts)
    # measure in the metric frame, where self-adjoint becomes Hermitian
    w, u = np.linalg.eigh(h)
    sq = (u * np.sqrt(w)[:, None, :]) @ np.conj(np.swapaxes(u, 1, 2))
    sqi = (u / np.sqrt(w)[:, None, :]) @ np.conj(np.swapaxes(u, 1, 2))
    sym = sq @ (mc - slope * np.eye(metric.r)[None]) @ sqi
    sym = 0.5 * (sym + np.conj(np.swapaxes(sym, 1, 2)))
    worst = float(np.max(np.abs(np.linalg.eigvalsh(sym))))
    logger.debug("constant-contraction residual for %s: slope %.6f, defect %.3e",
                 metric.label, slope, worst)
    return worst


# ---------------------------------------------------------------------------
# hat metric on the relative hyperplane line
# ---------------------------------------------------------------------------

def hat_weight_homogeneous(metric, z, lam):
    """Weight of the induced metric on the relative hyperplane line at the
    covector lam over base point z: 1 / (lam H^{-1} lam*).

    Section values against the frame lam get squared norm |v|^2 * weight.
    """
    z = np.asarray(z, dtype=complex)
    lam = np.asarray(lam, dtype=complex)
    if np.any(np.max(np.abs(lam), axis=1) == 0.0):
        raise ValueError("zero covector has no induced weight")
    hinv = metric.inverse(z)
    q = np.einsum("ni,nij,nj->n", lam, hinv, np.conj(lam)).real
    return 1.0 / q


def hat_weight(metric, pts, model):
    """Chart version: pts are (z, xi) points of the projectivized dual and
    the covector is the affine frame (1, xi)."""
    pts = np.asarray(pts, dtype=complex)
    z = pts[:, : model.m]
    xi = pts[:, model.m:]
    lam = np.concatenate([np.ones((pts.shape[0], 1), dtype=complex), xi], axis=1)
    return hat_weight_homogeneous(metric, z, lam)


# ---------------------------------------------------------------------------
# Gram-induced Fubini-Study metric
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InducedFSMetric:
    """Metric data induced by a Gram matrix through a section basis.

    density(p) is the squared norm of the point evaluation against a
    G-orthonormal frame; kahler_form is its exact log-Hessian via section
    jets (no finite differences)."""

    gram: GramMatrix
    basis: object
    p: np.ndarray  # inverse Gram

    def density(self, pts):
        v = self.basis.eval_embedding(pts)
        return np.einsum("ni,ij,nj->n", v, self.p, np.conj(v)).real

    def log_density(self, pts):
        return np.log(self.density(pts))

    def section_norm2(self, w, pts):
        """|w(p)|^2 in the induced metric for a coefficient vector w."""
        v = self.basis.eval_embedding(pts)
        num = np.abs(v @ np.asarray(w, dtype=complex)) ** 2
        return num / self.density(pts)

    def kahler_form(self, pts):
        pts = np.asarray(pts, dtype=complex)
        v = self.basis.eval_embedding(pts)
        jet = self.basis.eval_embedding_jet(pts)       # (n, N, d)
        u = np.einsum("ij,nj->ni", self.p, np.conj(v))  # P vbar
        dd = np.einsum("nia,ij,njb->nab", jet, self.p, np.conj(jet))
        dD = np.einsum("nia,ni->na", jet, u)
        dens = np.einsum("ni,ni->n", v, u).real
        return (dd / dens[:, None, None]
                - dD[:, :, None] * np.conj(dD)[:, None, :] / dens[:, None, None] ** 2)

    def volume_density(self, pts):
        """Density of omega_G^d/d! against Lebesgue measure on the chart."""
        g = self.kahler_form(pts)
        det = np.linalg.det(g).real
        if np.any(det <= 0):
            raise NumericalGuardError("induced form degenerate at a node")
        return det * 2.0 ** g.shape[1]


def fs_from_gram(gram, basis):
    if not isinstance(gram, GramMatrix):
        gram = make_gram(gram)
    if gram.n != basis.count:
        raise ValueError("Gram size does not match the section count")
    ev = np.linalg.eigvalsh(gram.matrix)
    if ev[0] <= 0:
        raise NumericalGuardError(
            f"Gram not positive definite (smallest eigenvalue {ev[0]:.3e})"
        )
    return InducedFSMetric(gram, basis, np.linalg.inv(gram.matrix))
