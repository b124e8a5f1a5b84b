"""Energy functionals, reduced energy over peak configurations, and force balance.

The exact energy uses the Dirichlet operator's quadratic form, so its
Euler-Lagrange equation is exactly the discrete equation the solvers treat.
The asymptotic reduced energy is the closed form

    I(q) = c_star * sum_i V(xi_i)^theta
           - sum_{i != ell} C_pair(i, ell) / |q_i - q_ell|^(n+2s)

with C_pair(i,ell) = (1/2) * A_tail(lam_ell-scaled) * Ip(lam_i-scaled), the
net pairwise coefficient of the two-bump expansion (quadrature cross term
minus the (p+1)-fold nonlinear term; the p+1 factors cancel).

The force-balance residual normalizes the multiplier expansion by the
kernel norm: for each peak,

    R_ij = -eps * dV/dx_j (xi_i)
           + c * sum_{ell != i} (q_ell - q_i)_j / |q_ell - q_i|^(n+2s+1)

with c = 2 (n+2s) Ip A_tail / m2 evaluated at the local amplitude; its zeros
are the leading-order critical configurations.
"""

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import HitBoundary, StepBelowGrid
from .groundstate import signed_pow

# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------


@dataclass
class Potential:
    """Positive C^2 potential with gradient and Hessian evaluators."""

    name: str
    f: callable
    grad: callable = None
    hess: callable = None
    params: dict = dc_field(default_factory=dict)
    fd_step: float = 1e-5

    def __call__(self, x):
        return self.f(np.asarray(x, dtype=float))

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.grad is not None:
            return np.atleast_1d(self.grad(x))
        n = x.size
        g = np.zeros(n)
        for d in range(n):
            e = np.zeros(n)
            e[d] = self.fd_step
            g[d] = (self.f(x + e) - self.f(x - e)) / (2 * self.fd_step)
        return g

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        if self.hess is not None:
            return np.atleast_2d(self.hess(x))
        n = x.size
        H = np.zeros((n, n))
        hstep = self.fd_step * 10
        for a in range(n):
            for b in range(n):
                ea = np.zeros(n); ea[a] = hstep
                eb = np.zeros(n); eb[b] = hstep
                H[a, b] = (self.f(x + ea + eb) - self.f(x + ea - eb)
                           - self.f(x - ea + eb) + self.f(x - ea - eb)) / (4 * hstep**2)
        return 0.5 * (H + H.T)

    def on_grid(self, domain, epsilon):
        """V(eps x) evaluated at every grid node.

        Evaluators accept a point of shape (n,) or a batch of shape (n, m).
        """
        pts = epsilon * domain.points()
        vals = self.f(pts.T)
        return np.asarray(vals, dtype=float).reshape(domain.dims)

    def check_positive(self, domain):
        v = self.on_grid(domain, domain.epsilon)
        m = float(v[domain.interior_mask].min())
        if m <= 0:
            raise ValueError(f"potential {self.name} not positive on the domain (min {m})")
        return m


def _batch_r2(x, center):
    """Squared distance to center for a point (n,) or batch (n, m)."""
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        return np.sum((np.atleast_1d(x) - center) ** 2)
    return np.sum((x - center[:, None]) ** 2, axis=0)


def constant_potential(c0=1.0):
    if c0 <= 0:
        raise ValueError("constant potential must be positive")

    def f(x):
        x = np.asarray(x, dtype=float)
        if x.ndim <= 1:
            return c0
        return np.full(x.shape[1], c0)

    return Potential("constant", f,
                     grad=lambda x: np.zeros(np.atleast_1d(x).size),
                     hess=lambda x: np.zeros((np.atleast_1d(x).size,) * 2),
                     params={"c0": c0})


def bump_potential(v0=1.0, amp=0.5, center=(0.0,), width=0.35, name="bump"):
    """Single nondegenerate critical point at `center` (max if amp>0, min if amp<0)."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if v0 <= 0 or v0 + min(amp, 0.0) <= 0:
        raise ValueError("bump potential must stay positive")

    def f(x):
        r2 = _batch_r2(x, center)
        return v0 + amp * np.exp(-r2 / width**2)

    def grad(x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum((x - center) ** 2)
        return amp * np.exp(-r2 / width**2) * (-2.0 / width**2) * (x - center)

    def hess(x):
        x = np.asarray(x, dtype=float)
        d = x - center
        r2 = np.sum(d**2)
        e = amp * np.exp(-r2 / width**2)
        n = center.size
        return e * (4.0 * np.outer(d, d) / width**4 - 2.0 * np.eye(n) / width**2)

    return Potential(name, f, grad=grad, hess=hess,
                     params={"v0": v0, "amp": amp, "center": center.tolist(),
                             "width": width})


def double_well_potential(v0=1.0, depth=0.3, centers=((-0.45,), (0.45,)), width=0.25):
    """Two nondegenerate wells (local minima of V) inside the domain."""
    c1 = np.atleast_1d(np.asarray(centers[0], dtype=float))
    c2 = np.atleast_1d(np.asarray(centers[1], dtype=float))
    if v0 - 2 * depth <= 0:
        raise ValueError("wells too deep: potential would lose positivity")

    def f(x):
        r1 = _batch_r2(x, c1)
        r2 = _batch_r2(x, c2)
        return v0 - depth * (np.exp(-r1 / width**2) + np.exp(-r2 / width**2))

    def grad(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x, dtype=float)
        for c in (c1, c2):
            d = x - c
            g += -depth * np.exp(-np.sum(d**2) / width**2) * (-2.0 / width**2) * d
        return g

    def hess(x):
        x = np.asarray(x, dtype=float)
        n = c1.size
        H = np.zeros((n, n))
        for c in (c1, c2):
            d = x - c
            e = -depth * np.exp(-np.sum(d**2) / width**2)
            H += e * (4.0 * np.outer(d, d) / width**4 - 2.0 * np.eye(n) / width**2)
        return H

    return Potential("double_well", f, grad=grad, hess=hess,
                     params={"v0": v0, "depth": depth,
                             "centers": [c1.tolist(), c2.tolist()], "width": width})


POTENTIALS = {
    "constant": constant_potential,
    "bump": bump_potential,
    "double_well": double_well_potential,
}


def potential_from_config(spec):
    spec = dict(spec)
    kind = spec.pop("id")
    if kind not in POTENTIALS:
        raise ValueError(f"unknown potential id {kind!r}")
    return POTENTIALS[kind](**spec)


# ---------------------------------------------------------------------------
# energies
# ---------------------------------------------------------------------------


def energy(u, potential, epsilon, op, p):
    """J(u) = 1/2 <u, ((-Delta)^s + V(eps x)) u> - 1/(p+1) int |u|^{p+1}.

    Uses the Dirichlet operator's lattice kernel for the quadratic form, so
    the first variation of this energy is exactly the discrete equation.
    """
    dom = u.domain
    if not u.exterior_zero:
        raise ValueError("energy requires an exterior-zero field")
    vol = dom.h**dom.n
    symbol_part = np.sum(u.values * _lattice_apply(op, u.values)) * vol
    vgrid = potential.on_grid(dom, epsilon)
    quad = 0.5 * (symbol_part + np.sum(vgrid * u.values**2) * vol)
    return float(quad - np.sum(np.abs(u.values) ** (p + 1)) * vol / (p + 1))


def _lattice_apply(op, values):
    from .gridcore import symbol_convolve

    return symbol_convolve(op._symbol, values)


def energy_gradient_field(u, potential, epsilon, op, p):
    """First variation of the discrete energy: the unprojected equation residual."""
    dom = u.domain
    vgrid = potential.on_grid(dom, epsilon)
    out = _lattice_apply(op, u.values) + vgrid * u.values - signed_pow(u.values, p)
    out = np.where(dom.interior_mask, out, 0.0)
    from .gridcore import Field

    return Field(dom, out, exterior_zero=True)


def free_energy(lam, gs):
    """Energy of the rescaled free profile: lam^theta * c_star."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    return float(gs.scaled_c_star(lam))


def pair_coefficient(gs, lam_i, lam_ell):
    """Net pairwise interaction coefficient of the reduced energy."""
    return 0.5 * gs.scaled_constant("Ip", lam_i) * gs.scaled_tail_amplitude(lam_ell)


@dataclass
class ReducedEnergyReport:
    mode: str
    value: float
    value_asymptotic: float
    c_star: float
    pair_coefficients: np.ndarray
    gap: float
    tau_bar: float
    within_envelope: bool
    details: dict = dc_field(default_factory=dict)


def reduced_energy_asymptotic(q, epsilon, potential, gs):
    """Closed-form reduced energy at a configuration (continuous in q)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    k = q.shape[0]
    xi = epsilon * q
    lam = np.array([float(potential(x)) for x in xi])
    val = float(sum(gs.scaled_c_star(l) for l in lam))
    nu = gs.decay_exponent
    pair = np.zeros((k, k))
    for i in range(k):
        for ell in range(k):
            if i == ell:
                continue
            pair[i, ell] = pair_coefficient(gs, lam[i], lam[ell])
            dist = np.linalg.norm(q[i] - q[ell])
            val -= pair[i, ell] / dist**nu
    return val, pair


def reduced_gradient_asymptotic(q, epsilon, potential, gs):
    """Analytic gradient of the asymptotic reduced energy, shape (k, n)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    k, n = q.shape
    xi = epsilon * q
    lam = np.array([float(potential(x)) for x in xi])
    grads = np.array([potential.gradient(x) for x in xi])
    nu = gs.decay_exponent
    p = gs.p
    s = gs.s
    out = np.zeros((k, n))
    a_exp = p / (p - 1) - n / (2 * s)          # Ip scaling power
    b_exp = 1 / (p - 1) - (n + 2 * s) / (2 * s)  # tail-amplitude scaling power
    for i in range(k):
        out[i] += epsilon * gs.theta * lam[i] ** (gs.theta - 1) * gs.c_star * grads[i]
        for ell in range(k):
            if ell == i:
                continue
            diff = q[i] - q[ell]
            dist = np.linalg.norm(diff)
            c_il = pair_coefficient(gs, lam[i], lam[ell])
            c_li = pair_coefficient(gs, lam[ell], lam[i])
            # amplitude dependence through V(xi_i)
            dc_il = c_il * a_exp / lam[i] * epsilon * grads[i]
            dc_li = c_li * b_exp / lam[i] * epsilon * grads[i]
            out[i] -= (dc_il + dc_li) / dist**nu
            out[i] += (c_il + c_li) * nu * diff / dist ** (nu + 2)
    return out


def reduced_energy(config, gs, domain=None, mode="asymptotic", solver_opts=None):
    """Reduced energy report; exact mode runs the full nonlinear projected solve."""
    from . import reduction

    q, eps, pot = config.q, config.epsilon, config.potential
    asym, pair = reduced_energy_asymptotic(q, eps, pot, gs)
    grad_norm = float(np.linalg.norm(
        np.array([pot.gradient(x) for x in config.xi])))
    mu = reduction.NormSpec.default_mu(gs.n, gs.s)
    eta_term = 0.0 if np.isinf(config.eta) else config.eta ** (mu - gs.n - 2 * gs.s)
    tau_bar = (eps * grad_norm + eps**2
               + (0.0 if np.isinf(config.eta) else
                  config.eta ** (-2 * (gs.n + 2 * gs.s - mu))
                  + config.eta ** (-min(2.0, gs.p) * (gs.n + 2 * gs.s))))
    if mode == "asymptotic":
        return ReducedEnergyReport("asymptotic", asym, asym, gs.c_star, pair,
                                   0.0, tau_bar, True,
                                   details={"eta_term": eta_term})
    if domain is None:
        raise ValueError("exact mode requires a domain")
    from .corrections import build_ansatz

    bundle = build_ansatz(config, gs, domain)
    solve = reduction.solve_nonlinear_projected(bundle, opts=solver_opts)
    u_total = solve.solution_field(bundle)
    lam0 = float(config.lam[0])
    exact = energy(u_total, pot, eps, bundle.ops[lam0], gs.p)
    gap = abs(exact - asym)
    return ReducedEnergyReport("exact", exact, asym, gs.c_star, pair, gap,
                               tau_bar, gap <= 10 * max(tau_bar, 1e-14),
                               details={"phi_star_norm": solve.star_norm,
                                        "multipliers": solve.multipliers.tolist()})


def reduced_gradient(config, gs, domain=None, mode="asymptotic", step=None):
    """Gradient of the reduced energy in q, shape (k, n).

    Asymptotic mode returns (finite-difference, closed-form).  Exact mode
    uses central differences with on-grid steps; requesting a step below the
    grid spacing raises StepBelowGrid.
    """
    q, eps, pot = config.q, config.epsilon, config.potential
    if mode == "asymptotic":
        h_fd = step if step is not None else 0.1 * (domain.h if domain else 0.1)
        k, n = q.shape
        fd = np.zeros((k, n))
        for i in range(k):
            for j in range(n):
                qp = q.copy(); qp[i, j] += h_fd
                qm = q.copy(); qm[i, j] -= h_fd
                fp, _ = reduced_energy_asymptotic(qp, eps, pot, gs)
                fm, _ = reduced_energy_asymptotic(qm, eps, pot, gs)
                fd[i, j] = (fp - fm) / (2 * h_fd)
        return fd, reduced_gradient_asymptotic(q, eps, pot, gs)
    if domain is None:
        raise ValueError("exact mode requires a domain")
    h_fd = step if step is not None else domain.h
    if h_fd < domain.h * (1 - 1e-12):
        raise StepBelowGrid(f"step {h_fd} below grid spacing {domain.h}")
    h_fd = domain.h * max(1, int(round(h_fd / domain.h)))
    from .corrections import PeakConfig

    k, n = q.shape
    fd = np.zeros((k, n))
    for i in range(k):
        for j in range(n):
            vals = []
            for sign in (+1, -1):
                qs = q.copy()
                qs[i, j] += sign * h_fd
                cfg = PeakConfig(eps, qs, pot, config.domain,
                                 min_separation=config.min_separation)
                rep = reduced_energy(cfg, gs, domain=domain, mode="exact")
                vals.append(rep.value)
            fd[i, j] = (vals[0] - vals[1]) / (2 * h_fd)
    return fd, None


# ---------------------------------------------------------------------------
# critical-configuration search
# ---------------------------------------------------------------------------


@dataclass
class Region:
    """Admissible configuration set for the search."""

    kind: str                  # "xi_eta" (boundary floor + separation) or "cluster"
    domain: object = None
    epsilon: float = 1.0
    min_separation: float = 2.0
    center: np.ndarray = None  # cluster set: K = ball around center
    radius: float = None
    alpha: float = 0.5

    def spacing_floor(self, nu):
        if self.kind == "cluster":
            # rescaled units: |q_i - q_ell| > eps^{-alpha/(n+2s)}
            return self.epsilon ** (-self.alpha / nu) if self.alpha else 0.0
        return self.min_separation

    def admissible(self, q, nu):
        q = np.atleast_2d(q)
        k = q.shape[0]
        if self.kind == "cluster":
            for qi in q:
                if np.linalg.norm(self.epsilon * qi - self.center) >= self.radius:
                    return False
        else:
            floor = self.domain.delta_star / self.epsilon
            for qi in q:
                if self.domain.boundary_distance(qi) < floor:
                    return False
        if k > 1:
            floor = self.spacing_floor(nu)
            diffs = q[:, None, :] - q[None, :, :]
            dist = np.sqrt((diffs**2).sum(-1))
            if dist[~np.eye(k, dtype=bool)].min() <= floor:
                return False
        return True

    def margin(self, q, nu):
        """Distance to the nearest constraint (positive inside)."""
        q = np.atleast_2d(q)
        vals = []
        if self.kind == "cluster":
            for qi in q:
                vals.append((self.radius - np.linalg.norm(self.epsilon * qi - self.center))
                            / self.epsilon)
        else:
            floor = self.domain.delta_star / self.epsilon
            for qi in q:
                vals.append(self.domain.boundary_distance(qi) - floor)
        if q.shape[0] > 1:
            floor = self.spacing_floor(nu)
            diffs = q[:, None, :] - q[None, :, :]
            dist = np.sqrt((diffs**2).sum(-1))
            k = q.shape[0]
            vals.append(dist[~np.eye(k, dtype=bool)].min() - floor)
        return float(min(vals))

    def sample(self, k, rng, nu):
        for _ in range(4000):
            if self.kind == "cluster":
                pts = (self.center[None, :]
                       + (rng.random((k, self.center.size)) - 0.5) * 2 * self.radius * 0.9)
                q = pts / self.epsilon
            else:
                lo = self.domain._lo_e
                hi = self.domain._hi_e
                q = lo + rng.random((k, self.domain.n)) * (hi - lo)
            if self.admissible(q, nu):
                return np.atleast_2d(q)
        raise HitBoundary("could not sample an admissible configuration")


@dataclass
class SearchResult:
    q: np.ndarray
    value: float
    gradient_norm: float
    interior: bool
    margin: float
    trace: list
    candidates: list


def find_critical_config(gs, epsilon, k, potential, region, mode="max",
                         seed=0, restarts=20, grad_tol=1e-8, max_steps=400):
    """Stationary configuration of the asymptotic reduced energy.

    mode "max": projected gradient ascent with backtracking and boundary
    rejection (interior maximization).  mode "stationary": damped root find
    on the gradient (used for saddle/minimum targets of the potential).
    Restarts are deduplicated at 1e-4 distance.
    """
    nu = gs.decay_exponent
    rng = np.random.default_rng(seed)
    candidates = []
    trace = []
    for trial in range(restarts):
        q = region.sample(k, rng, nu)
        if mode == "max":
            res = _ascend(q, gs, epsilon, potential, region, nu, grad_tol, max_steps)
        else:
            res = _stationary(q, gs, epsilon, potential, region, nu, grad_tol)
        if res is None:
            continue
        q_fin, val, gnorm = res
        q_sorted = q_fin[np.lexsort(q_fin.T[::-1])]
        dup = any(np.linalg.norm(q_sorted - c[3]) < 1e-4 for c in candidates)
        if not dup:
            candidates.append((q_fin, val, gnorm, q_sorted))
        trace.append({"trial": trial, "value": val, "grad_norm": gnorm})
    if not candidates:
        raise HitBoundary("no admissible stationary configuration found")
    if mode == "max":
        best = max(candidates, key=lambda c: c[1])
    else:
        converged = [c for c in candidates if c[2] < grad_tol] or candidates
        best = min(converged, key=lambda c: c[2])
    q_best, val, gnorm, _ = best
    marg = region.margin(q_best, nu)
    interior = marg > 1e-9 and gnorm < grad_tol
    return SearchResult(q_best, val, gnorm, interior, marg, trace,
                        [(c[0].tolist(), c[1], c[2]) for c in candidates])


def _ascend(q, gs, epsilon, potential, region, nu, grad_tol, max_steps):
    """Gradient ascent with backtracking; steps leaving the region are rejected."""
    step = 0.5
    val, _ = reduced_energy_asymptotic(q, epsilon, potential, gs)
    for _ in range(max_steps):
        g = reduced_gradient_asymptotic(q, epsilon, potential, gs)
        gnorm = float(np.linalg.norm(g))
        if gnorm < grad_tol:
            return q, val, gnorm
        moved = False
        while step > 1e-14:
            q_try = q + step * g / max(gnorm, 1e-30)
            if not region.admissible(q_try, nu):
                step *= 0.5
                continue
            v_try, _ = reduced_energy_asymptotic(q_try, epsilon, potential, gs)
            if v_try > val:
                q, val = q_try, v_try
                step = min(step * 1.6, 4.0)
                moved = True
                break
            step *= 0.5
        if not moved:
            break
        if step < 1e-13:
            break
    g = reduced_gradient_asymptotic(q, epsilon, potential, gs)
    return q, val, float(np.linalg.norm(g))


def _stationary(q, gs, epsilon, potential, region, nu, grad_tol):
    from scipy.optimize import least_squares

    shape = q.shape

    def fun(x):
        return reduced_gradient_asymptotic(x.reshape(shape), epsilon, potential, gs).ravel()

    sol = least_squares(fun, q.ravel(), xtol=1e-14, ftol=1e-14, gtol=1e-14)
    q_fin = sol.x.reshape(shape)
    if not region.admissible(q_fin, nu):
        return None
    gnorm = float(np.linalg.norm(fun(sol.x)))
    val, _ = reduced_energy_asymptotic(q_fin, epsilon, potential, gs)
    return q_fin, val, gnorm


# ---------------------------------------------------------------------------
# force balance
# ---------------------------------------------------------------------------


def balance_coefficient(gs, lam):
    """Interaction prefactor of the balance identity at amplitude lam."""
    nu = gs.decay_exponent
    return (2.0 * nu * gs.scaled_constant("Ip", lam) * gs.scaled_tail_amplitude(lam)
            / gs.scaled_constant("m2", lam))


def balance_residual(q, epsilon, potential, gs):
    """Leading-order force balance per peak and coordinate, shape (k, n)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    k, n = q.shape
    xi = epsilon * q
    lam_hat = float(potential(xi.mean(axis=0)))
    c = balance_coefficient(gs, lam_hat)
    nu = gs.decay_exponent
    out = np.zeros((k, n))
    for i in range(k):
        out[i] = -epsilon * potential.gradient(xi[i])
        for ell in range(k):
            if ell == i:
                continue
            diff = q[ell] - q[i]
            dist = np.linalg.norm(diff)
            out[i] += c * diff / dist ** (nu + 1)
    return out


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------


def write_energy_csv(path, rows):
    """Rows of (eps, I_exact, I_asym, gap)."""
    _write_csv(path, ["eps", "I_exact", "I_asym", "gap"], rows)


def write_interaction_csv(path, rows):
    """Rows of (spacing, interaction)."""
    _write_csv(path, ["spacing", "interaction"], rows)


def write_balance_csv(path, rows):
    """Rows of (config..., gradient..., balance residual...)."""
    if not rows:
        return
    kcols = len(rows[0]) // 3
    header = ([f"q{j}" for j in range(kcols)]
              + [f"grad{j}" for j in range(kcols)]
              + [f"balance{j}" for j in range(kcols)])
    _write_csv(path, header, rows)


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
    return path
