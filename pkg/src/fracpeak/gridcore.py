"""Grids, discrete fields with exterior-zero convention, and discrete fractional operators.

Two realizations of the fractional Laplacian coexist:

* free-space mode: the continuum Fourier symbol ``|xi|^(2s)`` applied on the
  padded periodic box.  Exact on grid Fourier modes, spectrally accurate on
  band-limited data.
* Dirichlet mode: the lattice fractional Laplacian, the s-th power of the
  standard discrete Laplacian on the padded torus.  Its off-diagonal kernel
  is negative (jump-process generator), so the interior-restricted matrix is
  an M-matrix: SPD for lam > 0, discrete maximum principle, positive
  resolvent.  The two modes agree to O(h^2) on smooth interior fields.

All operators live on a periodic box that pads the rescaled domain by a
configurable factor (default 4x), so "exterior" nodes extend well past the
domain boundary and tail convolutions stay on one grid.
"""

from dataclasses import dataclass, field
import numpy as np
import scipy.fft as sfft
import scipy.linalg

from .errors import BudgetExceeded, NoConvergence, SingularSystem, TailTooLarge

_EDGE_LAYERS = 2  # grid layers counted as "padding edge" for tail checks


def _next_even_fast(n):
    m = sfft.next_fast_len(int(np.ceil(n)))
    while m % 2:
        m = sfft.next_fast_len(m + 1)
    return m


@dataclass
class Domain:
    """Rectangular padded grid covering the rescaled domain Omega/epsilon.

    shape is ("box", lo, hi) or ("ball", center, radius) in physical Omega
    coordinates; all grid data lives in rescaled (x/epsilon) coordinates.
    Instances are immutable by convention once constructed.
    """

    n: int
    shape: tuple
    epsilon: float
    h: float
    pad_factor: float = 4.0
    delta_star: float = None

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError("only n = 1 or 2 grids are supported")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        kind = self.shape[0]
        if kind == "box":
            lo = np.atleast_1d(np.asarray(self.shape[1], dtype=float))
            hi = np.atleast_1d(np.asarray(self.shape[2], dtype=float))
            if lo.size != self.n or hi.size != self.n or np.any(hi <= lo):
                raise ValueError("box bounds inconsistent with dimension")
            self._lo_e = lo / self.epsilon
            self._hi_e = hi / self.epsilon
            self.inradius_omega = float(np.min(hi - lo) / 2.0)
        elif kind == "ball":
            c = np.atleast_1d(np.asarray(self.shape[1], dtype=float))
            r = float(self.shape[2])
            if c.size != self.n or r <= 0:
                raise ValueError("ball center/radius inconsistent")
            self._lo_e = (c - r) / self.epsilon
            self._hi_e = (c + r) / self.epsilon
            self.inradius_omega = r
        else:
            raise ValueError(f"unknown domain shape {kind!r}")
        if self.delta_star is None:
            self.delta_star = 0.25 * self.inradius_omega
        if not 0 < self.delta_star <= self.inradius_omega:
            raise ValueError("delta_star must lie in (0, inradius(Omega)]")

        center = 0.5 * (self._lo_e + self._hi_e)
        extent = self._hi_e - self._lo_e
        dims, axes = [], []
        for d in range(self.n):
            nd = _next_even_fast(self.pad_factor * extent[d] / self.h)
            dims.append(nd)
            axes.append(center[d] + (np.arange(nd) - nd // 2) * self.h)
        self.dims = tuple(dims)
        self.axes = axes
        self.size = int(np.prod(self.dims))

        grids = np.meshgrid(*axes, indexing="ij")
        tol = 1e-9 * self.h
        if kind == "box":
            mask = np.ones(self.dims, dtype=bool)
            for d in range(self.n):
                mask &= (grids[d] > self._lo_e[d] + tol) & (grids[d] < self._hi_e[d] - tol)
        else:
            c_e = np.atleast_1d(np.asarray(self.shape[1], dtype=float)) / self.epsilon
            r2 = sum((grids[d] - c_e[d]) ** 2 for d in range(self.n))
            mask = r2 < (float(self.shape[2]) / self.epsilon - tol) ** 2
        self.interior_mask = mask
        self.interior_idx = np.flatnonzero(mask.ravel())
        self.n_interior = int(self.interior_idx.size)
        self._coord_grids = grids

    # -- geometry helpers -------------------------------------------------

    @property
    def inradius_scaled(self):
        return self.inradius_omega / self.epsilon

    def coords(self):
        """Meshgrid coordinate arrays of the full padded grid (rescaled units)."""
        return self._coord_grids

    def points(self):
        """(size, n) array of all node coordinates."""
        return np.stack([g.ravel() for g in self._coord_grids], axis=1)

    def boundary_distance(self, q):
        """Distance from a point (rescaled coords) to the boundary of Omega_eps."""
        q = np.atleast_1d(np.asarray(q, dtype=float))
        if self.shape[0] == "box":
            return float(np.min(np.minimum(q - self._lo_e, self._hi_e - q)))
        c_e = np.atleast_1d(np.asarray(self.shape[1], dtype=float)) / self.epsilon
        return float(self.shape[2]) / self.epsilon - float(np.linalg.norm(q - c_e))

    def contains(self, q):
        return self.boundary_distance(q) > 0

    def nearest_node(self, q):
        """Snap a rescaled-coordinate point to the nearest grid node."""
        q = np.atleast_1d(np.asarray(q, dtype=float))
        idx = tuple(int(round((q[d] - self.axes[d][0]) / self.h)) for d in range(self.n))
        for d in range(self.n):
            if not 0 <= idx[d] < self.dims[d]:
                raise ValueError("point outside the padded grid")
        node = np.array([self.axes[d][idx[d]] for d in range(self.n)])
        return node, idx

    def edge_mask(self, layers=_EDGE_LAYERS):
        """Mask of the outermost grid layers (the padding edge)."""
        m = np.zeros(self.dims, dtype=bool)
        for d in range(self.n):
            sl = [slice(None)] * self.n
            sl[d] = slice(0, layers)
            m[tuple(sl)] = True
            sl[d] = slice(self.dims[d] - layers, self.dims[d])
            m[tuple(sl)] = True
        return m


@dataclass
class Field:
    """Grid function on the full padded grid of a Domain.

    With exterior_zero set, values vanish at every node outside Omega_eps
    (enforced by mask_exterior / asserted by validate).
    """

    domain: Domain
    values: np.ndarray
    exterior_zero: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.domain.dims:
            raise ValueError(f"values shape {self.values.shape} != grid {self.domain.dims}")

    @classmethod
    def zeros(cls, domain, exterior_zero=False):
        return cls(domain, np.zeros(domain.dims), exterior_zero)

    @classmethod
    def from_function(cls, domain, fn, exterior_zero=False):
        vals = fn(*domain.coords())
        f = cls(domain, np.asarray(vals, dtype=float), exterior_zero)
        if exterior_zero:
            f = f.mask_exterior()
        return f

    def copy(self):
        return Field(self.domain, self.values.copy(), self.exterior_zero)

    def mask_exterior(self):
        vals = np.where(self.domain.interior_mask, self.values, 0.0)
        return Field(self.domain, vals, True)

    def interior(self):
        return self.values.ravel()[self.domain.interior_idx]

    def validate(self, tol=0.0):
        if self.exterior_zero:
            ext = np.abs(np.where(self.domain.interior_mask, 0.0, self.values))
            if ext.max(initial=0.0) > tol:
                raise ValueError("exterior-zero field has nonzero exterior values")
        return True

    def l2(self):
        return float(np.sqrt(np.sum(self.values**2) * self.domain.h**self.domain.n))

    def linf(self):
        return float(np.max(np.abs(self.values)))

    def integral(self):
        return float(np.sum(self.values) * self.domain.h**self.domain.n)


def field_from_interior(domain, u_int):
    """Exterior-zero field with the given interior values."""
    vals = np.zeros(domain.size)
    vals[domain.interior_idx] = u_int
    return Field(domain, vals.reshape(domain.dims), True)


# ---------------------------------------------------------------------------
# Fourier symbols on the padded torus
# ---------------------------------------------------------------------------


def _rfft_freq_grids(dims, h):
    freqs = [sfft.fftfreq(nd, d=h) * 2 * np.pi for nd in dims]
    freqs[-1] = sfft.rfftfreq(dims[-1], d=h) * 2 * np.pi
    return np.meshgrid(*freqs, indexing="ij")

def continuum_symbol(dims, h, s):
    """|xi|^(2s) on the rfft frequency grid of the padded torus."""
    grids = _rfft_freq_grids(dims, h)
    xi2 = sum(g**2 for g in grids)
    return xi2**s


def lattice_symbol(dims, h, s):
    """Symbol of the lattice fractional Laplacian: (sum 4 sin^2(theta/2) / h^2)^s."""
    grids = _rfft_freq_grids(dims, h)
    sig2 = sum((2.0 / h * np.sin(g * h / 2.0)) ** 2 for g in grids)
    return sig2**s


def symbol_convolve(symbol, values):
    dims = values.shape
    return sfft.irfftn(sfft.rfftn(values) * symbol, s=dims)


def lattice_kernel(dims, h, s):
    """Real-space kernel of the lattice operator (row of the full torus matrix)."""
    sym = lattice_symbol(dims, h, s)
    return sfft.irfftn(sym, s=dims)


def resolvent_symbol(dims, h, s, lam):
    """Symbol of the torus resolvent ((-Lap)^s + lam)^{-1}; kernel is positive."""
    if lam <= 0:
        raise ValueError("resolvent requires lam > 0")
    return 1.0 / (lattice_symbol(dims, h, s) + lam)


def resolvent_convolve(domain, s, lam, values):
    """Apply the free lattice resolvent ((-Lap)^s + lam)^{-1} on the padded torus."""
    sym = resolvent_symbol(domain.dims, domain.h, s, lam)
    return symbol_convolve(sym, values)


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


@dataclass
class FracOp:
    """Discrete fractional operator (-Delta)^s + lam on a Domain.

    mode "free": continuum symbol, spectral application.
    mode "dirichlet": lattice kernel restricted to interior nodes; immutable
    after assembly, factorizations are cached.
    """

    domain: Domain
    s: float
    lam: float = 0.0
    mode: str = "free"
    direct_limit: int = 20000
    _symbol: np.ndarray = field(default=None, repr=False)
    _kernel: np.ndarray = field(default=None, repr=False)
    _dense: np.ndarray = field(default=None, repr=False)
    _cho: tuple = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 < self.s < 1:
            raise ValueError("order s must lie in (0,1)")
        if self.mode == "free":
            self._symbol = continuum_symbol(self.domain.dims, self.domain.h, self.s)
        elif self.mode == "dirichlet":
            self._symbol = lattice_symbol(self.domain.dims, self.domain.h, self.s)
            self._kernel = sfft.irfftn(self._symbol, s=self.domain.dims)
        else:
            raise ValueError(f"unknown mode {self.mode!r}")

    # -- free-space application ------------------------------------------

    def apply_symbol(self, values, lam=None):
        lam = self.lam if lam is None else lam
        return symbol_convolve(self._symbol, values) + lam * values

    # -- Dirichlet machinery ----------------------------------------------

    @property
    def diagonal(self):
        """Kernel value at offset zero (row diagonal before the lam shift)."""
        return float(self._kernel.flat[0])

    def dense_matrix(self):
        """Interior-restricted dense matrix; assembled once, cached."""
        if self.mode != "dirichlet":
            raise ValueError("dense matrix only exists in Dirichlet mode")
        if self._dense is None:
            dom = self.domain
            m = dom.n_interior
            if m > self.direct_limit:
                raise BudgetExceeded(f"{m} interior unknowns exceed direct limit {self.direct_limit}")
            idx = np.stack(np.unravel_index(dom.interior_idx, dom.dims), axis=1)
            offs = [(idx[:, d, None] - idx[None, :, d]) % dom.dims[d] for d in range(dom.n)]
            A = self._kernel[tuple(offs)] if dom.n > 1 else self._kernel[offs[0]]
            A = np.asarray(A, dtype=float)
            A[np.diag_indices(m)] += self.lam
            self._dense = A
        return self._dense

    def factor(self):
        if self._cho is None:
            A = self.dense_matrix()
            try:
                self._cho = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
            except scipy.linalg.LinAlgError as exc:
                raise SingularSystem(f"Cholesky failed for lam={self.lam}: {exc}") from exc
        return self._cho

    def matvec_interior(self, u_int):
        """A @ u on interior nodes via torus convolution (matrix-free path)."""
        dom = self.domain
        full = np.zeros(dom.size)
        full[dom.interior_idx] = u_int
        conv = symbol_convolve(self._symbol, full.reshape(dom.dims)).ravel()
        return conv[dom.interior_idx] + self.lam * u_int

    def smallest_eigenvalue(self, iters=30):
        """Inverse-power estimate of the smallest eigenvalue (SPD probe)."""
        cho = self.factor()
        rng = np.random.default_rng(0)
        v = rng.standard_normal(self.domain.n_interior)
        v /= np.linalg.norm(v)
        mu = np.inf
        for _ in range(iters):
            w = scipy.linalg.cho_solve(cho, v, check_finite=False)
            nrm = np.linalg.norm(w)
            v = w / nrm
            mu_new = float(v @ self.matvec_interior(v))
            if abs(mu_new - mu) < 1e-12 * abs(mu_new):
                mu = mu_new
                break
            mu = mu_new
        return mu


def free_space_op(domain, s, lam=0.0):
    return FracOp(domain, s, lam, mode="free")


def assemble_dirichlet(domain, s, lam, direct_limit=20000, budget=250_000, probe=False):
    """Dirichlet-mode operator on interior nodes; probe checks SPD via Cholesky."""
    if domain.n_interior > budget:
        raise BudgetExceeded(
            f"{domain.n_interior} interior unknowns exceed budget {budget}"
        )
    op = FracOp(domain, s, lam, mode="dirichlet", direct_limit=direct_limit)
    if probe:
        if domain.n_interior <= direct_limit:
            lam_min = op.smallest_eigenvalue()
            if not lam_min > 0:
                raise SingularSystem(f"smallest eigenvalue estimate {lam_min} <= 0")
        # matrix-free path: SPD follows from symbol positivity; nothing to factor
    return op


def apply_free(op, f, tail_tol=1e-6, check_tail=True):
    """Apply the free-space operator (-Delta)^s + lam spectrally.

    Raises TailTooLarge when |f| at the padding edge exceeds tail_tol
    relative to max|f| (aliasing risk for slowly decaying data).  Pass
    check_tail=False for genuinely periodic data such as Fourier modes.
    """
    if op.mode != "free":
        raise ValueError("apply_free requires a free-space operator")
    if f.domain is not op.domain and f.domain.dims != op.domain.dims:
        raise ValueError("field and operator live on different grids")
    if check_tail:
        peak = np.max(np.abs(f.values))
        if peak > 0:
            edge = np.max(np.abs(f.values[f.domain.edge_mask()]))
            if edge > tail_tol * peak:
                raise TailTooLarge(
                    f"edge magnitude {edge:.3e} exceeds {tail_tol:.1e} * max|f| = {tail_tol * peak:.3e}"
                )
    out = op.apply_symbol(f.values)
    return Field(f.domain, out, exterior_zero=False)


def solve_dirichlet(op, rhs, exterior_datum=None, tol=1e-12, maxiter=2000):
    """Solve ((-Delta)^s + lam) u = rhs at interior nodes, u = datum outside.

    Dense Cholesky below the operator's direct limit, otherwise CG with a
    diagonal preconditioner on the torus-convolution matvec.  The discrete
    residual is checked to 1e-10 relative.
    """
    if op.mode != "dirichlet":
        raise ValueError("solve_dirichlet requires a Dirichlet-mode operator")
    if op.lam <= 0:
        raise ValueError("solve_dirichlet requires lam > 0")
    dom = op.domain
    b = rhs.values.ravel()[dom.interior_idx].astype(float).copy()
    if not np.all(np.isfinite(b)):
        raise ValueError("rhs not finite on interior nodes")

    datum_full = None
    if exterior_datum is not None:
        datum_full = np.where(dom.interior_mask, 0.0, exterior_datum.values)
        if np.any(datum_full):
            conv = symbol_convolve(op._symbol, datum_full).ravel()
            b -= conv[dom.interior_idx]
        else:
            datum_full = None

    if dom.n_interior <= op.direct_limit:
        cho = op.factor()
        u = scipy.linalg.cho_solve(cho, b, check_finite=False)
    else:
        from scipy.sparse.linalg import LinearOperator, cg

        diag = op.diagonal + op.lam
        A = LinearOperator(
            (dom.n_interior, dom.n_interior), matvec=op.matvec_interior, dtype=float
        )
        M = LinearOperator(
            (dom.n_interior, dom.n_interior), matvec=lambda v: v / diag, dtype=float
        )
        trace = []
        u, info = cg(
            A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=M,
            callback=lambda xk: trace.append(float(np.linalg.norm(op.matvec_interior(xk) - b))),
        )
        if info != 0:
            raise NoConvergence(f"CG did not converge (info={info})", trace=trace)

    res = np.linalg.norm(op.matvec_interior(u) - b)
    scale = np.linalg.norm(b)
    if scale > 0 and res > 1e-10 * scale:
        raise NoConvergence(f"dirichlet solve residual {res / scale:.2e} above 1e-10")

    out = field_from_interior(dom, u)
    if datum_full is not None:
        vals = out.values.copy()
        vals[~dom.interior_mask] = datum_full[~dom.interior_mask]
        return Field(dom, vals, exterior_zero=False)
    return out
