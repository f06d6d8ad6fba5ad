"""Small convex kernels: pseudo-inverse, affine projection, and QP solvers.

Everything here is deterministic and dependency-free beyond numpy/scipy
factorizations.  The QP path uses operator splitting between the quadratic
part and the polytope indicator; subproblems in this package are small, so a
dense prefactored KKT solve per iteration is the right trade.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class KernelError(RuntimeError):
    """Numerical failure in a kernel (singular KKT system, divergence)."""


class QpInfeasibleError(KernelError):
    """The polytope appears empty (divergence detected)."""


class QpMaxIterError(KernelError):
    def __init__(self, msg, primal_residual, dual_residual):
        super().__init__(msg)
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual


def pseudo_inverse(M: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values below sigma_max * max(rows, cols) * eps are truncated, so
    rank-deficient inputs get the minimum-norm inverse.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros(M.shape[::-1])
    if not np.all(np.isfinite(M)):
        raise ValueError("pseudo_inverse requires finite entries")
    rcond = max(M.shape) * np.finfo(float).eps
    return np.linalg.pinv(M, rcond=rcond)


@dataclass(frozen=True)
class Polytope:
    """Constraint set {z : G z <= h, A_eq z = b_eq}; empty parts mean unconstrained."""

    G: np.ndarray = None
    h: np.ndarray = None
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None

    def __post_init__(self):
        def norm(M, v, width_hint):
            if M is None:
                M = np.zeros((0, width_hint))
                v = np.zeros(0)
            M = np.asarray(M, dtype=float)
            v = np.asarray(v, dtype=float).ravel()
            if M.shape[0] != v.shape[0]:
                raise ValueError("constraint matrix/vector row counts differ")
            if not (np.all(np.isfinite(M)) and np.all(np.isfinite(v))):
                raise ValueError("polytope requires finite entries")
            return M, v

        width = 0
        for M in (self.G, self.A_eq):
            if M is not None:
                width = np.asarray(M).shape[1]
        G, h = norm(self.G, self.h, width)
        A_eq, b_eq = norm(self.A_eq, self.b_eq, width)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "A_eq", A_eq)
        object.__setattr__(self, "b_eq", b_eq)

    @property
    def n_ineq(self) -> int:
        return self.G.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    def is_unconstrained(self) -> bool:
        return self.n_ineq == 0 and self.n_eq == 0

    def contains(self, z: np.ndarray, tol: float = 1e-8) -> bool:
        ok_ineq = self.n_ineq == 0 or np.all(self.G @ z <= self.h + tol)
        ok_eq = self.n_eq == 0 or np.max(np.abs(self.A_eq @ z - self.b_eq)) <= tol
        return bool(ok_ineq and ok_eq)


@dataclass
class ColumnProjector:
    """Precomputed data for projecting onto a local affine set {V : Z V = rhs}.

    The pseudo-inverse is computed once; projecting is then two matrix
    multiplies.  ``consistency`` is || Z Z+ rhs - rhs ||_F, which must be tiny
    for the local system to be solvable at all.
    """

    Z: np.ndarray
    Z_pinv: np.ndarray
    rhs: np.ndarray
    rank: int
    cond: float
    consistency: float
    # cached product: projecting V costs one (vars x cons) and one (cons x vars) GEMM
    _pinv_rhs: np.ndarray = field(default=None, repr=False)

    @classmethod
    def build(cls, Z: np.ndarray, rhs: np.ndarray) -> "ColumnProjector":
        Z = np.asarray(Z, dtype=float)
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            rhs = rhs[:, None]
        if Z.shape[0] != rhs.shape[0]:
            raise ValueError("constraint matrix and rhs row counts differ")
        if Z.size:
            sv = np.linalg.svd(Z, compute_uv=False)
            cutoff = sv[0] * max(Z.shape) * np.finfo(float).eps if sv.size else 0.0
            rank = int(np.sum(sv > cutoff))
            cond = float(sv[0] / sv[rank - 1]) if rank else np.inf
        else:
            rank, cond = 0, 0.0
        Z_pinv = pseudo_inverse(Z)
        pinv_rhs = Z_pinv @ rhs
        consistency = float(np.linalg.norm(Z @ pinv_rhs - rhs))
        return cls(Z=Z, Z_pinv=Z_pinv, rhs=rhs, rank=rank, cond=cond,
                   consistency=consistency, _pinv_rhs=pinv_rhs)

    def project(self, V: np.ndarray) -> np.ndarray:
        """Euclidean projection of V onto the affine set."""
        return V + self._pinv_rhs - self.Z_pinv @ (self.Z @ V)

    def residual(self, V: np.ndarray) -> float:
        return float(np.linalg.norm(self.Z @ V - self.rhs))


def project_affine(proj: ColumnProjector, V: np.ndarray) -> np.ndarray:
    return proj.project(V)


class EqQpSolver:
    """Prefactored solver for min 1/2 z'Hz + g'z s.t. A_eq z = b_eq.

    The KKT matrix is factored once; repeated solves with fresh (g, b_eq) are
    two triangular solves.  Falls back to a least-squares KKT solve when the
    factorization hits a (near-)singular pivot, which still recovers the
    unique primal point whenever H is positive definite on the nullspace of
    A_eq.
    """

    def __init__(self, H: np.ndarray, A_eq: np.ndarray = None):
        H = np.asarray(H, dtype=float)
        self.n = H.shape[0]
        if A_eq is None or np.asarray(A_eq).size == 0:
            A_eq = np.zeros((0, self.n))
        A_eq = np.asarray(A_eq, dtype=float)
        self.m = A_eq.shape[0]
        self.H = H
        self.A_eq = A_eq
        kkt = np.zeros((self.n + self.m, self.n + self.m))
        kkt[:self.n, :self.n] = H
        if self.m:
            kkt[self.n:, :self.n] = A_eq
            kkt[:self.n, self.n:] = A_eq.T
        self._kkt = kkt
        self._cho = None
        self._lu = None
        self._fallback = False
        self._verified = False
        try:
            with np.errstate(all="ignore"):
                if self.m == 0:
                    self._cho = scipy.linalg.cho_factor(H)
                    if not np.all(np.isfinite(self._cho[0])):
                        raise np.linalg.LinAlgError
                else:
                    self._lu = scipy.linalg.lu_factor(kkt)
                    if not np.all(np.isfinite(self._lu[0])):
                        raise np.linalg.LinAlgError
        except (np.linalg.LinAlgError, ValueError, scipy.linalg.LinAlgError):
            self._cho = None
            self._lu = None
            self._fallback = True

    def solve(self, g: np.ndarray, b_eq: np.ndarray = None) -> np.ndarray:
        return self.solve_full(g, b_eq)[0]

    def solve_full(self, g: np.ndarray, b_eq: np.ndarray = None):
        """Returns (minimizer, equality multipliers)."""
        rhs = np.empty(self.n + self.m)
        rhs[:self.n] = -np.asarray(g, dtype=float)
        if self.m:
            rhs[self.n:] = np.asarray(b_eq, dtype=float)
        if self._fallback:
            sol = self._solve_lstsq(rhs)
        else:
            with np.errstate(all="ignore"):
                if self._cho is not None:
                    sol = scipy.linalg.cho_solve(self._cho, rhs)
                else:
                    sol = scipy.linalg.lu_solve(self._lu, rhs)
            if not np.all(np.isfinite(sol)):
                self._fallback = True
                sol = self._solve_lstsq(rhs)
        # residual verified on the first solve per factorization; later calls
        # reuse the same factors on fresh right-hand sides
        if not self._verified or self._fallback:
            kkt_res = float(np.linalg.norm(self._kkt @ sol - rhs))
            scale = 1.0 + float(np.linalg.norm(rhs))
            if kkt_res > 1e-7 * scale:
                ranks = np.linalg.matrix_rank(self._kkt)
                raise KernelError(
                    f"singular KKT system: residual {kkt_res:.3e}, "
                    f"rank {ranks}/{self._kkt.shape[0]}")
            self._verified = True
        return sol[:self.n], sol[self.n:]

    def _solve_lstsq(self, rhs):
        sol, _, _, _ = scipy.linalg.lstsq(self._kkt, rhs, lapack_driver="gelsy")
        return sol

    def kkt_apply_inverse(self, rhs):
        """Raw KKT solves (vector or matrix right-hand side), no sign handling."""
        if self._fallback:
            return self._solve_lstsq(rhs)
        with np.errstate(all="ignore"):
            if self._cho is not None:
                return scipy.linalg.cho_solve(self._cho, rhs)
            return scipy.linalg.lu_solve(self._lu, rhs)


def solve_eq_qp(H: np.ndarray, g: np.ndarray, A_eq: np.ndarray = None,
                b_eq: np.ndarray = None) -> np.ndarray:
    """Equality-constrained QP via a KKT solve; raises on singular systems."""
    return EqQpSolver(H, A_eq).solve(g, b_eq)


@dataclass
class QpSettings:
    sigma: float = 1.0          # splitting penalty
    tol: float = 1e-8           # primal and dual residual tolerance
    max_iter: int = 10000
    diverge_scale: float = 1e8  # residual blow-up factor treated as infeasibility
    polish: bool = True         # active-set refinement once the set stabilizes
    polish_start: int = 10
    polish_every: int = 10
    polish_tol: float = 1e-9    # dual-sign / inactive-feasibility slack


class QpSolver:
    """Operator-splitting QP: min 1/2 z'Hz + g'z over a polytope.

    Splits on s = G z with the indicator of {s <= h}:

        z-step   prefactored KKT solve with penalty sigma on ||Gz - s + w||
        s-step   clip to the bound
        w-step   scaled dual ascent

    No over-relaxation.  Once the splitting's active-set guess stabilizes, a
    polish step solves the equality-constrained QP on that set and returns it
    when it verifies as a KKT point; factorizations are cached per active set,
    so warm-started repeat solves typically finish in one iteration.
    Deterministic throughout.
    """

    def __init__(self, H: np.ndarray, polytope: Polytope,
                 settings: QpSettings = None):
        self.settings = settings or QpSettings()
        self.P = polytope
        self.H0 = np.asarray(H, dtype=float)
        self.n = self.H0.shape[0]
        self.G = self.P.G
        if self.P.n_ineq:
            H_aug = self.H0 + self.settings.sigma * (self.G.T @ self.G)
        else:
            H_aug = self.H0
        self._eq = EqQpSolver(H_aug, self.P.A_eq if self.P.n_eq else None)
        self._polish = None

    def _polish_data(self):
        """Base KKT factor plus the Schur blocks of all inequality rows.

        Computed once; afterwards a polish attempt on any active set is one
        back-substitution plus a dense solve of active-set size.
        """
        if self._polish is None:
            base = EqQpSolver(self.H0, self.P.A_eq if self.P.n_eq else None)
            rhs = np.zeros((self.n + self.P.n_eq, self.P.n_ineq))
            rhs[:self.n] = self.G.T
            W = base.kkt_apply_inverse(rhs)
            S_all = self.G @ W[:self.n]
            self._polish = (base, W, S_all)
        return self._polish

    def solve(self, g: np.ndarray, b_eq: np.ndarray = None, h: np.ndarray = None,
              warm: tuple = None):
        """Returns (z, (s, w), iterations).  ``h`` overrides the polytope bound."""
        P, st = self.P, self.settings
        if h is None:
            h = P.h
        beq = b_eq if b_eq is not None else (P.b_eq if P.n_eq else None)
        if P.n_ineq == 0:
            return self._eq.solve(g, beq), (np.zeros(0), np.zeros(0)), 0
        sigma, G = st.sigma, self.G
        if warm is not None:
            s, w = warm[0].copy(), warm[1].copy()
        else:
            s, w = np.zeros(P.n_ineq), np.zeros(P.n_ineq)
        g = np.asarray(g, dtype=float)
        r_prim = r_dual = np.inf
        floor = np.inf
        for k in range(1, st.max_iter + 1):
            z = self._eq.solve(g - sigma * (G.T @ (s - w)), beq)
            Gz = G @ z
            s_new = np.minimum(Gz + w, h)
            r_dual = sigma * float(np.linalg.norm(G.T @ (s_new - s)))
            s = s_new
            r = Gz - s
            w += r
            r_prim = float(np.linalg.norm(r))
            if r_prim <= st.tol and r_dual <= st.tol:
                return z, (s, w), k
            if st.polish and (k == 1 or
                              (k >= st.polish_start and k % st.polish_every == 0)):
                polished = self._try_polish(g, beq, h, Gz, w)
                if polished is not None:
                    return polished + (k,)
            floor = min(floor, max(r_prim, 1e-300))
            if r_prim > st.diverge_scale * floor and k > 100:
                raise QpInfeasibleError(
                    f"QP diverged (primal residual {r_prim:.3e}); "
                    "polytope is likely empty")
        raise QpMaxIterError(
            f"QP did not converge in {st.max_iter} iterations "
            f"(primal {r_prim:.3e}, dual {r_dual:.3e})", r_prim, r_dual)

    def _try_polish(self, g, beq, h, Gz, w):
        """Solve on the guessed active set; accept only a verified KKT point."""
        st = self.settings
        active = (w > 1e-12) | (Gz >= h - st.polish_tol)
        base, W, S_all = self._polish_data()
        rhs0 = np.empty(self.n + self.P.n_eq)
        rhs0[:self.n] = -g
        if self.P.n_eq:
            rhs0[self.n:] = beq
        y0 = base.kkt_apply_inverse(rhs0)
        if active.any():
            act = np.flatnonzero(active)
            S_act = S_all[np.ix_(act, act)]
            target = self.G[act] @ y0[:self.n] - h[act]
            try:
                lam = np.linalg.solve(S_act, target)
            except np.linalg.LinAlgError:
                lam, _, _, _ = scipy.linalg.lstsq(S_act, target,
                                                  lapack_driver="gelsy")
            if not np.all(np.isfinite(lam)) or lam.min() < -st.polish_tol:
                return None
            y = y0 - W[:, act] @ lam
        else:
            act = np.zeros(0, dtype=int)
            lam = np.zeros(0)
            y = y0
        z, nu = y[:self.n], y[self.n:]
        scale = 1.0 + float(np.linalg.norm(g))
        station = self.H0 @ z + g + self.G[act].T @ lam
        if self.P.n_eq:
            station += self.P.A_eq.T @ nu
            if float(np.max(np.abs(self.P.A_eq @ z - beq))) > 1e-7 * scale:
                return None
        if float(np.linalg.norm(station)) > 1e-7 * scale:
            return None
        slack = self.G @ z - h
        if act.size and float(np.max(np.abs(slack[act]))) > 1e-7 * scale:
            return None
        inactive = np.ones(self.P.n_ineq, dtype=bool)
        inactive[act] = False
        if inactive.any() and slack[inactive].max() > st.polish_tol:
            return None
        # hand back the splitting fixed point at the solution for warm starts
        s_out = np.minimum(self.G @ z, h)
        w_out = np.zeros_like(w)
        w_out[act] = lam / st.sigma
        return z, (s_out, w_out)


def solve_qp(H: np.ndarray, g: np.ndarray, polytope: Polytope,
             settings: QpSettings = None) -> np.ndarray:
    """One-shot polytope-constrained QP; see QpSolver for the iteration."""
    z, _, _ = QpSolver(H, polytope, settings).solve(g)
    return z
