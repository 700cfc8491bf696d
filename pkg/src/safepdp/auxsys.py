"""Auxiliary LQR systems whose minimizer is the trajectory derivative.

Everything here is matrix valued: the ``r`` parameter directions are carried
as columns of a single recursion rather than ``r`` separate solves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .barrier import BarrierSpec
from .deriv import expand
from .errors import InconsistentEqualities, SingularLuu
from .ocp import (ActiveSet, Multipliers, ProblemSpec, Trajectory, _terminal_points, _theta,
                  costates, hamiltonian, terminal_hamiltonian)

LUU_FLOOR = 1e-10
RANK_TOL = 1e-10


@dataclass
class AuxLqr:
    Lxx: np.ndarray   # (T, n, n)
    Lxu: np.ndarray   # (T, n, m)
    Luu: np.ndarray   # (T, m, m)
    Lxth: np.ndarray  # (T, n, r)
    Luth: np.ndarray  # (T, m, r)
    Fx: np.ndarray    # (T, n, n)
    Fu: np.ndarray    # (T, n, m)
    Fth: np.ndarray   # (T, n, r)
    LxxT: np.ndarray  # (n, n)
    LxthT: np.ndarray  # (n, r)
    X0: np.ndarray    # (n, r)
    # optional equality rows; per-step lists of (k_t, .) arrays
    Gx: Optional[list] = None
    Gu: Optional[list] = None
    Gth: Optional[list] = None
    Hx: Optional[list] = None
    Hu: Optional[list] = None
    Hth: Optional[list] = None
    GxT: Optional[np.ndarray] = None
    GthT: Optional[np.ndarray] = None
    HxT: Optional[np.ndarray] = None
    HthT: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.Fx.shape[0]

    @property
    def dims(self):
        return self.Fx.shape[1], self.Fu.shape[2], self.X0.shape[1]

    @property
    def has_equalities(self) -> bool:
        return any(b is not None for b in (self.Gx, self.Hx, self.GxT, self.HxT))

    def equality_rows(self, t: int):
        """Stacked (E_x, E_u, E_theta) rows at stage ``t``, or at the terminal when ``t == T``."""
        n, m, r = self.dims
        if t == self.T:
            blocks = [(self.GxT, self.GthT), (self.HxT, self.HthT)]
            Ex = [b[0] for b in blocks if b[0] is not None]
            Eth = [b[1] for b in blocks if b[0] is not None]
            if not Ex:
                return np.zeros((0, n)), np.zeros((0, 0)), np.zeros((0, r))
            return np.vstack(Ex), np.zeros((sum(e.shape[0] for e in Ex), 0)), np.vstack(Eth)
        rows = [(self.Gx, self.Gu, self.Gth), (self.Hx, self.Hu, self.Hth)]
        Ex, Eu, Eth = [np.zeros((0, n))], [np.zeros((0, m))], [np.zeros((0, r))]
        for bx, bu, bth in rows:
            if bx is not None:
                Ex.append(bx[t])
                Eu.append(bu[t])
                Eth.append(bth[t])
        return np.vstack(Ex), np.vstack(Eu), np.vstack(Eth)


@dataclass
class TrajectoryGradient:
    X: np.ndarray  # (T+1, n, r)
    U: np.ndarray  # (T, m, r)

    def flat(self) -> np.ndarray:
        """d xi / d theta with rows ordered as ``Trajectory.flat``."""
        r = self.X.shape[2]
        return np.vstack([self.X.reshape(-1, r), self.U.reshape(-1, r)])


def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


_SECOND = (("x", "x"), ("x", "u"), ("u", "u"), ("x", "theta"), ("u", "theta"))


def _common(spec: ProblemSpec, theta, traj: Trajectory, L, LT):
    X, U = traj.states[:-1], traj.controls
    eL = expand(L, X, U, theta, second=_SECOND, name=getattr(L, "__name__", "hamiltonian"))
    eF = expand(spec.dynamics, X, U, theta, first=("x", "u", "theta"), name=f"{spec.name}.dynamics")
    eT = expand(LT, *_terminal_points(traj), theta, second=(("x", "x"), ("x", "theta")),
                name=getattr(LT, "__name__", "terminal"))
    e0 = expand(lambda x, u, th: spec.initial_state(th), np.zeros((1, 0)), np.zeros((1, 0)), theta,
                first=("theta",), name=f"{spec.name}.initial_state")
    h = {k: eL.hess[k][:, 0] for k in _SECOND}
    return AuxLqr(Lxx=_sym(h[("x", "x")]), Lxu=h[("x", "u")], Luu=_sym(h[("u", "u")]),
                  Lxth=h[("x", "theta")], Luth=h[("u", "theta")],
                  Fx=eF.jac["x"], Fu=eF.jac["u"], Fth=eF.jac["theta"],
                  LxxT=_sym(eT.hess[("x", "x")][0, 0]), LxthT=eT.hess[("x", "theta")][0, 0],
                  X0=e0.jac["theta"][0])


def build_aux_constrained(spec: ProblemSpec, theta, traj: Trajectory, mult: Multipliers,
                          active: ActiveSet) -> AuxLqr:
    """Auxiliary system of the constrained problem at a KKT point, with active rows as equalities."""
    theta = _theta(spec, theta)
    aux = _common(spec, theta, traj, hamiltonian(spec, mult.costates, mult.v, mult.w),
                  terminal_hamiltonian(spec, mult.vT, mult.wT))
    X, U = traj.states[:-1], traj.controls
    xT, uT = _terminal_points(traj)
    n, m, r = spec.n, spec.m, spec.r
    if spec.q and active.count() - len(active.terminal) > 0:
        eg = expand(spec.path_ineq, X, U, theta, first=("x", "u", "theta"), name=f"{spec.name}.path_ineq")
        aux.Gx = [eg.jac["x"][t][active.path[t]] for t in range(spec.T)]
        aux.Gu = [eg.jac["u"][t][active.path[t]] for t in range(spec.T)]
        aux.Gth = [eg.jac["theta"][t][active.path[t]] for t in range(spec.T)]
    if spec.s:
        eh = expand(spec.path_eq, X, U, theta, first=("x", "u", "theta"), name=f"{spec.name}.path_eq")
        aux.Hx = list(eh.jac["x"])
        aux.Hu = list(eh.jac["u"])
        aux.Hth = list(eh.jac["theta"])
    if spec.qT and len(active.terminal):
        eg = expand(spec.term_fn("ineq"), xT, uT, theta, first=("x", "theta"))
        aux.GxT = eg.jac["x"][0][active.terminal]
        aux.GthT = eg.jac["theta"][0][active.terminal]
    if spec.sT:
        eh = expand(spec.term_fn("eq"), xT, uT, theta, first=("x", "theta"))
        aux.HxT = eh.jac["x"][0]
        aux.HthT = eh.jac["theta"][0]
    return aux


def build_aux_unconstrained(spec: ProblemSpec, theta, traj: Trajectory) -> AuxLqr:
    """Auxiliary system of a problem whose only constraints are the dynamics."""
    if spec.constrained:
        raise ValueError(f"{spec.name} has constraints; use build_aux_barrier or build_aux_constrained")
    theta = _theta(spec, theta)
    e0 = np.zeros((spec.T, 0))
    lam = costates(spec, theta, traj, e0, e0, np.zeros(0), np.zeros(0))
    return _common(spec, theta, traj, hamiltonian(spec, lam, e0, e0), terminal_hamiltonian(spec, [], []))


def build_aux_barrier(barrier: BarrierSpec, theta, traj: Trajectory) -> AuxLqr:
    """Auxiliary system of the barrier problem; no equality blocks."""
    return build_aux_unconstrained(barrier.as_problem(), theta, traj)


def _nullspace_split(N: np.ndarray, tol: float = RANK_TOL):
    """SVD pieces of ``N`` (k x m): range factors, row-space pseudo-inverse and nullspace."""
    k, m = N.shape
    if k == 0:
        return np.zeros((m, 0)), np.eye(m), np.zeros((0, 0))
    Us, S, Vt = np.linalg.svd(N, full_matrices=True)
    scale = max(1.0, S[0]) if S.size else 1.0
    rank = int(np.sum(S > tol * scale))
    pinv = Vt[:rank].T @ np.diag(1.0 / S[:rank]) @ Us[:, :rank].T  # (m, k)
    return pinv, Vt[rank:].T, Us[:, rank:]


def _compress(C, c, where, tol: float = RANK_TOL):
    """Drop redundant constraint-to-go rows; raise if a dropped row demands ``0 = c != 0``."""
    if C.shape[0] == 0:
        return C, c
    Us, S, Vt = np.linalg.svd(C, full_matrices=True)
    scale = max(1.0, np.abs(C).max(), np.abs(c).max() if c.size else 0.0)
    rank = int(np.sum(S > tol * scale))
    left = Us[:, rank:].T @ c
    if left.size and np.abs(left).max() > 1e-8 * scale:
        raise InconsistentEqualities(f"equality rows are inconsistent at {where} (residual {np.abs(left).max():.3g})")
    return np.diag(S[:rank]) @ Vt[:rank], Us[:, :rank].T @ c


def _reduced_factor(Quu, Z, t):
    if Z.shape[1] == 0:
        return None
    R = _sym(Z.T @ Quu @ Z)
    for bump in (0.0, LUU_FLOOR):
        try:
            cf = cho_factor(R + bump * np.eye(R.shape[0]))
        except LinAlgError:
            continue
        # reject numerically singular factors as well as indefinite ones
        d = np.abs(np.diag(cf[0]))
        if d.min() > 1e-7 * max(1.0, d.max()):
            return cf
    raise SingularLuu(f"reduced Luu is not positive definite at stage {t}")


def solve_aux(aux: AuxLqr) -> TrajectoryGradient:
    """Global minimizer of the (equality-constrained) auxiliary LQR, O(T)."""
    n, m, r = aux.dims
    T = aux.T
    eq = aux.has_equalities
    P, p = aux.LxxT.copy(), aux.LxthT.copy()
    if eq:
        Ex, _, Eth = aux.equality_rows(T)
        C, c = _compress(Ex, Eth, "stage T")
    Ks = np.zeros((T, m, n))
    ks = np.zeros((T, m, r))
    for t in range(T - 1, -1, -1):
        Fx, Fu, Fth = aux.Fx[t], aux.Fu[t], aux.Fth[t]
        PFu = P @ Fu
        nxt = P @ Fth + p
        Qxx = aux.Lxx[t] + Fx.T @ P @ Fx
        Quu = aux.Luu[t] + Fu.T @ PFu
        Qux = aux.Lxu[t].T + PFu.T @ Fx
        qx = aux.Lxth[t] + Fx.T @ nxt
        qu = aux.Luth[t] + Fu.T @ nxt
        if eq:
            Ex, Eu, Eth = aux.equality_rows(t)
            Nx = np.vstack([Ex, C @ Fx])
            Nu = np.vstack([Eu, C @ Fu])
            nn = np.vstack([Eth, C @ Fth + c])
            pinv, Z, U2 = _nullspace_split(Nu)
            Kc, kc = -pinv @ Nx, -pinv @ nn
        else:
            Z = np.eye(m)
            Kc, kc = np.zeros((m, n)), np.zeros((m, r))
        cf = _reduced_factor(Quu, Z, t)
        if cf is not None:
            K = Kc - Z @ cho_solve(cf, Z.T @ (Quu @ Kc + Qux))
            k = kc - Z @ cho_solve(cf, Z.T @ (Quu @ kc + qu))
        else:
            K, k = Kc, kc
        Ks[t], ks[t] = K, k
        KQuu = K.T @ Quu
        P = Qxx + KQuu @ K + K.T @ Qux + Qux.T @ K
        P = 0.5 * (P + P.T)
        p = qx + KQuu @ k + K.T @ qu + Qux.T @ k
        if eq:
            C, c = _compress(U2.T @ Nx, U2.T @ nn, f"stage {t}")
    Xs = np.zeros((T + 1, n, r))
    Us = np.zeros((T, m, r))
    Xs[0] = aux.X0
    if eq and C.shape[0]:
        res = C @ aux.X0 + c
        if np.abs(res).max() > 1e-8 * max(1.0, np.abs(c).max()):
            raise InconsistentEqualities(f"equality rows cannot hold from the initial condition (residual {np.abs(res).max():.3g})")
    for t in range(T):
        Us[t] = Ks[t] @ Xs[t] + ks[t]
        Xs[t + 1] = aux.Fx[t] @ Xs[t] + aux.Fu[t] @ Us[t] + aux.Fth[t]
    return TrajectoryGradient(Xs, Us)


def solve_aux_feedback(Fx: Sequence, Fu: Sequence, Ux: Sequence, Ue: Sequence, X0) -> TrajectoryGradient:
    """Integrate ``X' = Fx X + Fu U`` with ``U = Ux X + Ue`` from ``X0``."""
    Fx, Fu, Ux, Ue = (np.asarray(a, dtype=float) for a in (Fx, Fu, Ux, Ue))
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    T = Fx.shape[0]
    if not (Fu.shape[0] == Ux.shape[0] == Ue.shape[0] == T):
        raise ValueError("Fx, Fu, Ux, Ue must have the same length")
    n, r = X0.shape
    m = Fu.shape[2]
    if Fx.shape[1:] != (n, n) or Fu.shape[1] != n or Ux.shape[1:] != (m, n) or Ue.shape[1:] != (m, r):
        raise ValueError(f"inconsistent dimensions: Fx {Fx.shape}, Fu {Fu.shape}, Ux {Ux.shape}, "
                         f"Ue {Ue.shape}, X0 {X0.shape}")
    Xs = np.zeros((T + 1, n, r))
    Us = np.zeros((T, m, r))
    Xs[0] = X0
    for t in range(T):
        Us[t] = Ux[t] @ Xs[t] + Ue[t]
        Xs[t + 1] = Fx[t] @ Xs[t] + Fu[t] @ Us[t]
    return TrajectoryGradient(Xs, Us)


def diff_cpmp_residual(aux: AuxLqr, grad: TrajectoryGradient) -> dict:
    """Residuals of the differential optimality conditions at ``grad``.

    Costate-like matrices and the equality multipliers are the least-squares
    solution of the linear conditions they enter, so the stationarity value is
    zero exactly when such multipliers exist.
    """
    n, m, r = aux.dims
    T = aux.T
    X, U = grad.X, grad.U
    dyn = float(np.abs(X[0] - aux.X0).max(initial=0.0))
    for t in range(T):
        dyn = max(dyn, float(np.abs(aux.Fx[t] @ X[t] + aux.Fu[t] @ U[t] + aux.Fth[t] - X[t + 1]).max(initial=0.0)))
    out = {"dynamics": dyn}
    if not aux.has_equalities:
        Lam = aux.LxxT @ X[T] + aux.LxthT
        stat = 0.0
        for t in range(T - 1, -1, -1):
            stat = max(stat, float(np.abs(aux.Lxu[t].T @ X[t] + aux.Luu[t] @ U[t] + aux.Luth[t]
                                           + aux.Fu[t].T @ Lam).max(initial=0.0)))
            Lam = aux.Lxx[t] @ X[t] + aux.Lxu[t] @ U[t] + aux.Lxth[t] + aux.Fx[t].T @ Lam
        out.update(stationarity=stat, costate=0.0, equality=0.0)
        return out
    # dense least squares for Lambda_{1..T} and equality multipliers
    rows = [aux.equality_rows(t) for t in range(T + 1)]
    ks = [rw[0].shape[0] for rw in rows]
    nlam = T * n
    offs = np.concatenate([[0], np.cumsum(ks)]) + nlam
    nvar = int(offs[-1])
    neq = T * m + T * n  # stationarity rows for t = 0..T-1, costate rows for t = 1..T
    A = np.zeros((neq, nvar))
    B = np.zeros((neq, r))
    row = 0
    for t in range(T):  # stationarity
        Ex, Eu, _ = rows[t]
        A[row:row + m, t * n:(t + 1) * n] = aux.Fu[t].T
        A[row:row + m, offs[t]:offs[t + 1]] = Eu.T
        B[row:row + m] = -(aux.Lxu[t].T @ X[t] + aux.Luu[t] @ U[t] + aux.Luth[t])
        row += m
    for t in range(1, T + 1):  # costate: Lam_t - Fx' Lam_{t+1} - E_x' nu_t = L_x terms
        Ex = rows[t][0]
        A[row:row + n, (t - 1) * n:t * n] = np.eye(n)
        if t < T:
            A[row:row + n, t * n:(t + 1) * n] = -aux.Fx[t].T
            B[row:row + n] = aux.Lxx[t] @ X[t] + aux.Lxu[t] @ U[t] + aux.Lxth[t]
        else:
            B[row:row + n] = aux.LxxT @ X[T] + aux.LxthT
        A[row:row + n, offs[t]:offs[t + 1]] = -Ex.T
        row += n
    sol, *_ = np.linalg.lstsq(A, B, rcond=None)
    resid = A @ sol - B
    eqres = 0.0
    for t in range(T + 1):
        Ex, Eu, Eth = rows[t]
        if Ex.shape[0]:
            val = Ex @ X[t] + Eth + (Eu @ U[t] if t < T else 0.0)
            eqres = max(eqres, float(np.abs(val).max()))
    out.update(stationarity=float(np.abs(resid[:T * m]).max(initial=0.0)),
               costate=float(np.abs(resid[T * m:]).max(initial=0.0)), equality=eqres)
    return out
