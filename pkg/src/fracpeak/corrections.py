"""Multi-peak ansatz with Dirichlet boundary corrections and tail decomposition.

For each peak the free profile w_i is first polished into the exact solution
of the lattice free-space equation on the padded torus (a few Newton steps
from the sampled profile).  The corrected peak then solves

    ((-Delta)^s + lam_i) u_i = w_i^p   at interior nodes,  u_i = 0 outside,

and the tail decomposition w_i = u_i + tail_i + boundary_i is recovered from
the free lattice resolvent:

    tail_i     = ((-Delta)^s + lam_i)^{-1} [ w_i^p restricted outside ]
    boundary_i = w_i - u_i - tail_i

With all three operators built from the same torus kernel these identities
hold to solver precision, the resolvent kernel is positive (tail_i >= 0),
and boundary_i >= 0 by the discrete maximum principle.
"""

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import NegativePi, NoConvergence
from .fieldio import write_field
from .gridcore import (
    Field,
    assemble_dirichlet,
    field_from_interior,
    resolvent_convolve,
    solve_dirichlet,
    symbol_convolve,
)
from .groundstate import Peak, sample_peak, signed_pow, z_kernel


@dataclass
class PeakConfig:
    """k peak locations in rescaled coordinates with admissibility checks."""

    epsilon: float
    q: np.ndarray                 # (k, n)
    potential: object             # evaluator with V(xi), see energy.Potential
    domain: object
    min_separation: float = 2.0

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        self.k = self.q.shape[0]
        if self.q.shape[1] != self.domain.n:
            raise ValueError("peak coordinates inconsistent with domain dimension")
        self.xi = self.epsilon * self.q
        self.lam = np.array([float(self.potential(x)) for x in self.xi])
        if np.any(self.lam <= 0):
            raise ValueError("potential must be positive at every peak")
        self.d = min(self.domain.boundary_distance(qi) for qi in self.q)
        if self.k > 1:
            diffs = self.q[:, None, :] - self.q[None, :, :]
            dist = np.sqrt((diffs**2).sum(-1))
            self.eta = float(dist[~np.eye(self.k, dtype=bool)].min())
        else:
            self.eta = np.inf

    def validate(self):
        """Membership in the admissible configuration set."""
        floor = self.domain.delta_star / self.epsilon
        if self.d < floor:
            raise ValueError(
                f"peak too close to the boundary: d={self.d:.3f} < delta_star/eps={floor:.3f}"
            )
        if self.eta < self.min_separation:
            raise ValueError(
                f"peaks too close together: eta={self.eta:.3f} < {self.min_separation}"
            )
        return True


@dataclass
class CorrectedPeak:
    peak: Peak
    free: Field        # lattice-polished free profile w_i
    corrected: Field   # Dirichlet solution u_i (exterior-zero)
    tail: Field        # exterior-source resolvent part  (Lambda)
    boundary: Field    # remainder w_i - u_i - tail      (Pi)
    polish_residual: float


@dataclass
class AnsatzBundle:
    """Everything the projected solver needs for one configuration."""

    config: PeakConfig
    gs: object
    domain: object
    peaks: list                   # CorrectedPeak per site
    z: list                       # k x n list of translation-kernel Fields
    free_sum: Field               # W_q
    corrected_sum: Field          # U_q
    ops: dict = dc_field(default_factory=dict)   # Dirichlet operators keyed by lam

    @property
    def p(self):
        return self.gs.p

    def z_field(self, i, j):
        return self.z[i][j]

    def z_interior_matrix(self):
        """Interior samples of all translation kernels, (n_interior, k*n) column-major in (i,j)."""
        dom = self.domain
        cols = [self.z[i][j].values.ravel()[dom.interior_idx]
                for i in range(self.config.k) for j in range(dom.n)]
        return np.stack(cols, axis=1)


def _polish_on_torus(domain, s, lam, w0, center_idx, p, tol=1e-11, max_steps=12):
    """Newton-refine a sampled peak into the lattice free-space solution.

    Works on the padded torus with the lattice symbol; iterates are kept
    symmetric about the peak node, which pins the translation modes.
    """
    from scipy.sparse.linalg import LinearOperator, lgmres
    import scipy.fft as sfft
    from .gridcore import lattice_symbol

    dims = domain.dims
    sym = lattice_symbol(dims, domain.h, s)

    refl = []
    for d in range(domain.n):
        c = center_idx[d]
        refl.append((2 * c - np.arange(dims[d])) % dims[d])

    def symmetrize(v):
        for d in range(domain.n):
            v = 0.5 * (v + np.take(v, refl[d], axis=d))
        return v

    def apply_op(v):
        return symbol_convolve(sym, v) + lam * v

    u = symmetrize(w0.copy())
    size = u.size
    scale = np.max(np.abs(u))
    for _ in range(max_steps):
        F = apply_op(u) - signed_pow(u, p)
        fnorm = np.max(np.abs(F))
        if fnorm <= tol * scale:
            return u, fnorm / scale
        wp = p * np.abs(u) ** (p - 1)

        def matvec(v):
            vv = v.reshape(dims)
            sv = symmetrize(vv)
            out = symmetrize(apply_op(sv) - wp * sv)
            return (out + (vv - sv)).ravel()

        def precond(v):
            vv = v.reshape(dims)
            return sfft.irfftn(sfft.rfftn(vv) / (sym + lam), s=dims).ravel()

        A = LinearOperator((size, size), matvec=matvec, dtype=float)
        M = LinearOperator((size, size), matvec=precond, dtype=float)
        rhs = -symmetrize(F).ravel()
        inner = min(0.1, max(np.sqrt(fnorm / scale), 1e-9))
        delta, info = lgmres(A, rhs, M=M, rtol=inner, atol=0.0, maxiter=300)
        if info != 0:
            raise NoConvergence(f"peak polish Krylov failed (info={info})")
        u = symmetrize(u + delta.reshape(dims))
    raise NoConvergence(f"peak polish stalled at residual {fnorm / scale:.2e}")


def corrected_peak(peak, domain, op=None, polish=True, neg_tol=1e-9):
    """Dirichlet-corrected peak and its tail decomposition.

    Returns a CorrectedPeak holding (u_i, tail_i, boundary_i) together with
    the polished free profile.  NegativePi flags a discretization
    inconsistency (boundary_i below -neg_tol relative to its scale).
    """
    node, idx = domain.nearest_node(peak.q)
    if np.linalg.norm(node - peak.q) > 1e-9 * domain.h:
        peak = Peak(peak.gs, node, peak.lam)
    w_sampled = sample_peak(peak, domain)
    if polish:
        vals, pres = _polish_on_torus(
            domain, peak.gs.s, peak.lam, w_sampled.values, idx, peak.gs.p
        )
        free = Field(domain, vals, exterior_zero=False)
    else:
        free, pres = w_sampled, np.nan
    if op is None:
        op = assemble_dirichlet(domain, peak.gs.s, peak.lam)

    rhs_full = Field(domain, signed_pow(free.values, peak.gs.p))
    corrected = solve_dirichlet(op, rhs_full)

    src = np.where(domain.interior_mask, 0.0, rhs_full.values)
    tail_vals = resolvent_convolve(domain, peak.gs.s, peak.lam, src)
    tail = Field(domain, tail_vals, exterior_zero=False)

    boundary = Field(domain, free.values - corrected.values - tail_vals,
                     exterior_zero=False)
    neg = float(boundary.values[domain.interior_mask].min())
    if neg < -neg_tol:
        raise NegativePi(f"boundary part dips to {neg:.3e}")
    return CorrectedPeak(peak, free, corrected, tail, boundary, pres)


def build_ansatz(config, gs, domain, polish=True):
    """Assemble W_q, U_q, per-peak corrections and translation kernels."""
    config.validate()
    peaks = []
    ops = {}
    for i in range(config.k):
        lam = float(config.lam[i])
        if lam not in ops:
            ops[lam] = assemble_dirichlet(domain, gs.s, lam)
        pk = Peak(gs, config.q[i], lam)
        peaks.append(corrected_peak(pk, domain, op=ops[lam], polish=polish))

    z = [[z_kernel(cp.peak, j, domain) for j in range(domain.n)] for cp in peaks]
    free_sum = Field(domain, sum(cp.free.values for cp in peaks))
    corrected_sum = Field(domain, sum(cp.corrected.values for cp in peaks),
                          exterior_zero=True)
    return AnsatzBundle(config, gs, domain, peaks, z, free_sum, corrected_sum, ops)


def interaction_integral(bundle, i, ell):
    """Quadrature of w_i^p w_ell over the padded box, plus the tail-law model."""
    if i == ell:
        raise ValueError("interaction integral requires distinct peaks")
    dom = bundle.domain
    gs = bundle.gs
    wi = bundle.peaks[i].free.values
    wl = bundle.peaks[ell].free.values
    value = float(np.sum(signed_pow(wi, gs.p) * wl) * dom.h**dom.n)

    lam_i = float(bundle.config.lam[i])
    lam_l = float(bundle.config.lam[ell])
    dist = float(np.linalg.norm(bundle.config.q[i] - bundle.config.q[ell]))
    nu = gs.decay_exponent
    model = gs.scaled_constant("Ip", lam_i) * gs.scaled_tail_amplitude(lam_l) / dist**nu
    return value, model


def pi_weighted_integrals(bundle, i, ell, r, t, neg_tol=1e-9):
    """Quadrature of w_i^r * boundary_ell^t over the interior."""
    if r < 1 or t < 1:
        raise ValueError("exponents must be >= 1")
    dom = bundle.domain
    wi = bundle.peaks[i].free.values[dom.interior_mask]
    pi_l = bundle.peaks[ell].boundary.values[dom.interior_mask]
    neg = float(pi_l.min())
    if neg < -neg_tol:
        raise NegativePi(f"boundary part dips to {neg:.3e}")
    return float(np.sum(wi**r * np.clip(pi_l, 0.0, None) ** t) * dom.h**dom.n)


def export_bundle(bundle, directory):
    """One field file per component plus a manifest with norms and checks."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dom = bundle.domain
    files = {}
    for name, f in [("free_sum", bundle.free_sum), ("corrected_sum", bundle.corrected_sum)]:
        files[name] = str(write_field(directory / f"{name}.fpk", f))
    for i, cp in enumerate(bundle.peaks):
        for name, f in [("free", cp.free), ("corrected", cp.corrected),
                        ("tail", cp.tail), ("boundary", cp.boundary)]:
            files[f"peak{i}_{name}"] = str(write_field(directory / f"peak{i}_{name}.fpk", f))
    decomp = bundle.corrected_sum.values - (
        bundle.free_sum.values
        - sum(cp.tail.values + cp.boundary.values for cp in bundle.peaks)
    )
    manifest = {
        "epsilon": bundle.config.epsilon,
        "q": bundle.config.q.tolist(),
        "lam": bundle.config.lam.tolist(),
        "eta": None if np.isinf(bundle.config.eta) else bundle.config.eta,
        "d": bundle.config.d,
        "decomposition_sup_error": float(np.max(np.abs(decomp[dom.interior_mask]))),
        "min_tail": float(min(cp.tail.values.min() for cp in bundle.peaks)),
        "min_boundary_interior": float(min(
            cp.boundary.values[dom.interior_mask].min() for cp in bundle.peaks)),
        "polish_residuals": [cp.polish_residual for cp in bundle.peaks],
        "files": files,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
