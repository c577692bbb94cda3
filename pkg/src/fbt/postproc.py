"""Gate-set post-processing: CPTP projection, gauge fixing, error generators.

The Choi map ``R -> sum_ij R_ij B_j^T (x) B_i`` is a Frobenius isometry, so
projections are carried out on PTMs directly: the PSD step clips Choi
eigenvalues, the TP step resets the first PTM row to ``e_0``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np
import scipy.linalg
import scipy.optimize

from .gateset import DIM, SPAM_LABELS, NoisyGateSet, measured_effect, prepared_state
from .pauli import choi_to_ptm, pauli_basis, pauli_matrix, ptm_from_superop, ptm_to_choi

log = logging.getLogger(__name__)


class ProjectionWarning(UserWarning):
    pass


class BranchCutError(ValueError):
    pass


# --- CPTP projection ------------------------------------------------------------------------


def _project_psd(r: np.ndarray) -> np.ndarray:
    c = ptm_to_choi(r)
    c = 0.5 * (c + np.conj(np.swapaxes(c, -1, -2)))
    w, v = np.linalg.eigh(c)
    w = np.clip(w, 0.0, None)
    return choi_to_ptm((v * w[..., None, :]) @ np.conj(np.swapaxes(v, -1, -2)))


def _project_tp(r: np.ndarray) -> np.ndarray:
    out = r.copy()
    out[..., 0, :] = 0.0
    out[..., 0, 0] = 1.0
    return out


def is_cptp(r: np.ndarray, atol: float = 1e-10) -> np.ndarray:
    r = np.asarray(r)
    e0 = np.zeros(r.shape[-1])
    e0[0] = 1.0
    tp = np.all(np.abs(r[..., 0, :] - e0) <= atol, axis=-1)
    cp = np.linalg.eigvalsh(ptm_to_choi(r)).min(axis=-1) >= -atol
    return tp & cp


@lru_cache(maxsize=None)
def _tp_kernels(dim: int) -> np.ndarray:
    """Choi images of the first-row PTM directions ``e_0 e_j^T``."""
    from .pauli import _choi_kernel

    return np.ascontiguousarray(_choi_kernel(dim)[0])


def _psd_floor(r: np.ndarray) -> np.ndarray:
    """Mix with the fully depolarizing channel just enough to remove negative Choi eigenvalues."""
    dim = r.shape[-1]
    d = np.sqrt(dim)
    lam = np.linalg.eigvalsh(ptm_to_choi(r)).min(axis=-1)
    delta = np.where(lam < 0, -lam * d / (1.0 - lam * d), 0.0)
    depol = np.zeros((dim, dim))
    depol[0, 0] = 1.0
    return (1.0 - delta)[..., None, None] * r + delta[..., None, None] * depol


def cptp_project_batch(r: np.ndarray, tol: float = 1e-10, max_iter: int = 1000):
    """Nearest CPTP channels (Frobenius, equal in PTM and Choi form) for a stack of PTMs.

    The trace-preservation constraint fixes the first PTM row.  Its 16
    Lagrange multipliers ``y`` solve ``row0(P_psd(R + e_0 y^T)) = e_0``, the
    stationarity condition of the convex dual; that is solved by semismooth
    Newton steps using the generalized Jacobian of the eigenvalue clipping.
    Returns ``(projected, converged)``.
    """
    r = np.array(r, dtype=float)
    single = r.ndim == 2
    if single:
        r = r[None]
    out = r.copy()
    converged = np.ones(len(r), dtype=bool)
    todo = np.flatnonzero(~is_cptp(r))
    if todo.size:
        dim = r.shape[-1]
        kern = _tp_kernels(dim)  # (dim, D, D)
        e0 = np.zeros(dim)
        e0[0] = 1.0
        r0 = r[todo]
        n = len(todo)
        y = np.zeros((n, dim))
        y_old = np.zeros_like(y)
        direction = np.zeros_like(y)
        theta_old = np.full(n, np.inf)
        gn_old = np.full(n, np.inf)
        stuck = np.zeros(n, dtype=bool)
        slope = np.zeros(n)
        t = np.ones(n)
        proj = np.empty_like(r0)
        done = np.zeros(n, dtype=bool)
        active = np.arange(n)
        for _ in range(max_iter):
            z = r0[active].copy()
            z[:, 0, :] += y[active]
            c = ptm_to_choi(z)
            c = 0.5 * (c + np.conj(np.swapaxes(c, -1, -2)))
            w, v = np.linalg.eigh(c)
            wp = np.clip(w, 0.0, None)
            # dual objective theta(y) = |P_psd(R + e0 y^T)|^2 / 2 - y_0, gradient = row0(P_psd) - e0
            theta = 0.5 * np.sum(wp * wp, axis=1) - y[active, 0]
            p_all = choi_to_ptm((v * wp[:, None, :]) @ np.conj(np.swapaxes(v, -1, -2)))
            gn_all = np.linalg.norm(p_all[:, 0, :] - e0, axis=1)
            # Armijo backtracking on the convex dual; near the solution theta changes drop
            # below round-off, so a decrease of the residual norm is accepted as well
            armijo = theta <= theta_old[active] + 1e-4 * t[active] * slope[active]
            armijo |= gn_all < (1.0 - 1e-4) * gn_old[active]
            retry = ~armijo & (t[active] > 1e-12)
            stalled = ~armijo & ~retry
            if np.any(retry):
                idx = active[retry]
                t[idx] *= 0.5
                y[idx] = y_old[idx] + t[idx][:, None] * direction[idx]
            if np.any(stalled):
                # line search exhausted: the previous iterate is as good as the arithmetic allows
                idx = active[stalled]
                y[idx] = y_old[idx]
                done[idx] = gn_old[idx] < np.sqrt(tol) * 1e-2
                stuck[idx] = True
            ok = ~retry & ~stalled
            if np.any(ok):
                idx = active[ok]
                vv, lam, lamp = v[ok], w[ok], wp[ok]
                p_ptm = p_all[ok]
                proj[idx] = p_ptm
                grad = p_ptm[:, 0, :] - e0
                gn = np.linalg.norm(grad, axis=1)
                fin = gn < tol * 1e-2
                done[idx[fin]] = True
                upd = ~fin
                if np.any(upd):
                    a_idx = idx[upd]
                    vv, lam, lamp = vv[upd], lam[upd], lamp[upd]
                    diff = lam[:, :, None] - lam[:, None, :]
                    num = lamp[:, :, None] - lamp[:, None, :]
                    with np.errstate(divide="ignore", invalid="ignore"):
                        omega = np.where(np.abs(diff) > 1e-14, num / diff, (lam[:, :, None] > 0).astype(float))
                    vh = np.conj(np.swapaxes(vv, -1, -2))
                    a = vh[:, None] @ kern[None] @ vv[:, None]  # (S, dim, D, D)
                    n_s = len(a_idx)
                    at = np.swapaxes(a, -1, -2).reshape(n_s, dim, -1)
                    b = (a * omega[:, None]).reshape(n_s, dim, -1)
                    jac = (at @ np.swapaxes(b, -1, -2)).real
                    jac += 1e-13 * np.eye(dim)
                    d = -np.linalg.solve(jac, grad[upd][..., None])[..., 0]
                    sl = np.einsum("si,si->s", grad[upd], d)
                    # fall back to steepest descent if the Newton step is not a descent direction
                    bad = ~(sl < 0)
                    d[bad] = -grad[upd][bad]
                    sl[bad] = -gn[upd][bad] ** 2
                    y_old[a_idx] = y[a_idx]
                    theta_old[a_idx] = theta[ok][upd]
                    gn_old[a_idx] = gn[upd]
                    direction[a_idx] = d
                    slope[a_idx] = sl
                    t[a_idx] = 1.0
                    y[a_idx] += d
                    small = np.linalg.norm(d, axis=1) < tol * 1e-3
                    done[a_idx[small]] = True
            active = np.flatnonzero(~done & ~stuck)
            if active.size == 0:
                break
        x = _psd_floor(_project_tp(proj))
        out[todo] = x
        converged[todo] = done
        if not done.all():
            warnings.warn(
                f"CPTP projection did not converge for {int((~done).sum())} channel(s) "
                f"within {max_iter} iterations",
                ProjectionWarning,
                stacklevel=2,
            )
    if single:
        return out[0], bool(converged[0])
    return out, converged


def cptp_project(r: np.ndarray, tol: float = 1e-10, max_iter: int = 1000) -> np.ndarray:
    return cptp_project_batch(r, tol=tol, max_iter=max_iter)[0]


def project_gateset(gs: NoisyGateSet) -> NoisyGateSet:
    out = gs.copy()
    for k in out.noise:
        out.noise[k] = cptp_project(out.noise[k])
    for k in SPAM_LABELS:
        out.spam_noise[k] = cptp_project(out.spam_noise[k])
    return out


# --- gauge ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class GaugeTransform:
    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        e0 = np.zeros(s.shape[0])
        e0[0] = 1.0
        if not np.array_equal(s[0], e0):
            raise ValueError("gauge transform must be trace preserving (first row e_0)")
        cond = np.linalg.cond(s)
        if not np.isfinite(cond) or cond >= 1e6:
            raise ValueError(f"gauge transform is ill-conditioned (cond={cond:.3e})")

    @classmethod
    def identity(cls, dim: int = DIM) -> "GaugeTransform":
        return cls(np.eye(dim))

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.s)


def apply_gauge(gs: NoisyGateSet, s: np.ndarray | GaugeTransform) -> NoisyGateSet:
    """``G' = S^-1 G S``, ``rho' = S^-1 rho``, ``E' = E S``, expressed through the noise channels."""
    if isinstance(s, GaugeTransform):
        s = s.s
    s_inv = np.linalg.inv(s)
    out = gs.copy()
    for k in gs.noise:
        noisy = s_inv @ gs.noisy(k) @ s
        out.noise[k] = noisy @ np.linalg.inv(gs.ideal[k])
    out.spam_noise["rho"] = s_inv @ gs.spam_noise["rho"]
    out.spam_noise["E"] = gs.spam_noise["E"] @ s
    return out


def _gauge_parts(gs: NoisyGateSet, ideal: NoisyGateSet):
    gates = [(gs.noisy(k), ideal.noisy(k)) for k in gs.noise]
    return gates, (prepared_state(gs), prepared_state(ideal)), (measured_effect(gs), measured_effect(ideal))


def gauge_objective(s: np.ndarray, gs: NoisyGateSet, ideal: NoisyGateSet, w_g: float = 1.0, w_s: float = 1e-3):
    """Weighted Frobenius distance between the transformed set and the target, and its gradient in S."""
    gates, (rho, rho0), (eff, eff0) = _gauge_parts(gs, ideal)
    return _objective(s, gates, rho, rho0, eff, eff0, w_g, w_s)


def _objective(s, gates, rho, rho0, eff, eff0, w_g, w_s):
    t = np.linalg.inv(s)
    val = 0.0
    grad = np.zeros_like(s)
    for g, g0 in gates:
        tg = t @ g
        m = tg @ s
        res = m - g0
        val += w_g * np.sum(res * res)
        grad += 2 * w_g * (tg.T @ res - t.T @ res @ m.T)
    tr = t @ rho
    r = tr - rho0
    val += w_s * r @ r
    grad += -2 * w_s * np.outer(t.T @ r, tr)
    e = eff @ s - eff0
    val += w_s * e @ e
    grad += 2 * w_s * np.outer(eff, e)
    return val, grad


@dataclass
class GaugeResult:
    gateset: NoisyGateSet
    transform: GaugeTransform
    objective: float
    history: list = field(default_factory=list)
    success: bool = True


def gauge_optimize(
    gs: NoisyGateSet,
    ideal: NoisyGateSet,
    w_g: float = 1.0,
    w_s: float = 1e-3,
    max_iter: int = 500,
    tol: float = 1e-14,
) -> GaugeResult:
    """Fix the gauge by minimizing the weighted Frobenius distance to ``ideal``.

    S is parameterized as ``I + Delta`` with the first row of Delta held at
    zero, so every iterate is trace preserving.
    """
    gates, (rho, rho0), (eff, eff0) = _gauge_parts(gs, ideal)
    n = DIM
    big = 1e30

    def unpack(p):
        s = np.eye(n)
        s[1:] += p.reshape(n - 1, n)
        return s

    def fun(p):
        s = unpack(p)
        if np.linalg.cond(s) > 1e6:
            # rejected step: steep barrier so the line search backs off
            return big, np.zeros_like(p) + 1.0
        val, grad = _objective(s, gates, rho, rho0, eff, eff0, w_g, w_s)
        return val, grad[1:].ravel()

    history = [fun(np.zeros(n * (n - 1)))[0]]

    def callback(p):
        history.append(fun(p)[0])

    res = scipy.optimize.minimize(
        fun,
        np.zeros(n * (n - 1)),
        jac=True,
        method="L-BFGS-B",
        callback=callback,
        options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-12, "maxcor": 30},
    )
    s = unpack(res.x)
    try:
        transform = GaugeTransform(s)
        ok = bool(np.isfinite(res.fun)) and res.fun <= history[0]
    except ValueError:
        ok = False
    if not ok:
        warnings.warn("gauge optimization failed; returning the identity gauge", RuntimeWarning, stacklevel=2)
        transform = GaugeTransform.identity(n)
        return GaugeResult(gs.copy(), transform, history[0], history, False)
    log.debug("gauge objective %.3e -> %.3e in %d iterations", history[0], res.fun, res.nit)
    return GaugeResult(apply_gauge(gs, transform), transform, float(res.fun), history, True)


# --- error generators -----------------------------------------------------------------------


def _branch_distance(w: np.ndarray) -> np.ndarray:
    return np.where(w.real <= 0, np.abs(w.imag), np.abs(w))


def error_generator(r_noise: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Real principal logarithm of a noise PTM."""
    r_noise = np.asarray(r_noise, dtype=float)
    w = np.linalg.eigvals(r_noise)
    dist = _branch_distance(w)
    if dist.min() < tol:
        raise BranchCutError(
            f"eigenvalue {w[np.argmin(dist)]:.3e} lies on or near the negative real axis; "
            "regularize the channel (e.g. CPTP-project it) before taking the logarithm"
        )
    lg = scipy.linalg.logm(r_noise)
    if np.iscomplexobj(lg):
        if np.abs(lg.imag).max() > 1e-8 * max(1.0, np.abs(lg).max()):
            raise BranchCutError("matrix logarithm has no real principal branch")
        lg = lg.real
    return lg


def _pauli_labels() -> list[str]:
    return list(pauli_basis(2).labels[1:])


def _hamiltonian(p):
    return lambda x: -1j * (p @ x - x @ p)


def _stochastic(p):
    return lambda x: p @ x @ p - x


def _correlation(p, q):
    pq = p @ q + q @ p
    return lambda x: p @ x @ q + q @ x @ p - 0.5 * (pq @ x + x @ pq)


def _active(p, q):
    comm = p @ q - q @ p
    return lambda x: 1j * (p @ x @ q - q @ x @ p + 0.5 * (comm @ x + x @ comm))


@dataclass(frozen=True)
class GeneratorFrame:
    labels: tuple[str, ...]
    classes: tuple[str, ...]
    elements: np.ndarray  # (K, D, D) PTMs of the elementary generators
    duals: np.ndarray  # (K, D, D) with <duals_i, elements_j> = delta_ij

    @property
    def gram(self) -> np.ndarray:
        e = self.elements.reshape(len(self.labels), -1)
        return e @ e.T


@lru_cache(maxsize=None)
def generator_frame() -> GeneratorFrame:
    """Elementary H, S, C, A generators for two qubits and their dual frame."""
    d = 4
    paulis = {lab: pauli_matrix(lab) for lab in _pauli_labels()}
    labels, classes, elems = [], [], []
    for lab, p in paulis.items():
        labels.append(f"H_{lab}")
        classes.append("H")
        elems.append(ptm_from_superop(_hamiltonian(p), d))
    for lab, p in paulis.items():
        labels.append(f"S_{lab}")
        classes.append("S")
        elems.append(ptm_from_superop(_stochastic(p), d))
    for (a, p), (b, q) in combinations(paulis.items(), 2):
        labels.append(f"C_{a}_{b}")
        classes.append("C")
        elems.append(ptm_from_superop(_correlation(p, q), d))
    for (a, p), (b, q) in combinations(paulis.items(), 2):
        labels.append(f"A_{a}_{b}")
        classes.append("A")
        elems.append(ptm_from_superop(_active(p, q), d))
    elements = np.array(elems)
    flat = elements.reshape(len(labels), -1)
    gram = flat @ flat.T
    if np.linalg.cond(gram) > 1e12:
        raise np.linalg.LinAlgError("elementary generator Gram matrix is singular")
    duals = np.linalg.solve(gram, flat).reshape(elements.shape)
    elements.setflags(write=False)
    duals.setflags(write=False)
    return GeneratorFrame(tuple(labels), tuple(classes), elements, duals)


def hamiltonian_dual_closed_form(label: str) -> np.ndarray:
    """``-(i / 2 d^2) [P, .]`` as a PTM."""
    d = 4
    p = pauli_matrix(label)
    return ptm_from_superop(lambda x: -1j / (2 * d * d) * (p @ x - x @ p), d)


def generator_from_coefficients(coeffs: dict[str, float]) -> np.ndarray:
    frame = generator_frame()
    index = {lab: k for k, lab in enumerate(frame.labels)}
    out = np.zeros((DIM, DIM))
    for lab, c in coeffs.items():
        try:
            out += c * frame.elements[index[lab]]
        except KeyError:
            raise KeyError(f"unknown elementary generator {lab!r}") from None
    return out


@dataclass
class ErrorGeneratorDecomposition:
    h: dict[str, float]
    s: dict[str, float]
    c: dict[str, float]
    a: dict[str, float]
    residual_norm: float

    def coefficients(self) -> dict[str, float]:
        out = {}
        for cls, table in (("H", self.h), ("S", self.s), ("C", self.c), ("A", self.a)):
            out.update({f"{cls}_{k}": v for k, v in table.items()})
        return out

    def rows(self) -> list[dict]:
        """Tabular export: label, class, coefficient, infidelity contribution."""
        out = []
        for lab, v in self.coefficients().items():
            cls = lab[0]
            contrib = v * v if cls == "H" else (v if cls == "S" else 0.0)
            out.append({"label": lab, "class": cls, "coefficient": v, "contribution": contrib})
        return out


def decomposition_coefficients(l: np.ndarray) -> np.ndarray:
    """Dual-frame coefficients in ``generator_frame().labels`` order; accepts a stack."""
    frame = generator_frame()
    return np.tensordot(np.asarray(l), frame.duals, axes=([-2, -1], [1, 2]))


def decompose_generator(l: np.ndarray) -> ErrorGeneratorDecomposition:
    l = np.asarray(l, dtype=float)
    if l.shape != (DIM, DIM):
        raise ValueError(f"generator must be {DIM}x{DIM}, got {l.shape}")
    frame = generator_frame()
    coeffs = decomposition_coefficients(l)
    recon = np.tensordot(coeffs, frame.elements, axes=1)
    tables = {"H": {}, "S": {}, "C": {}, "A": {}}
    for lab, cls, v in zip(frame.labels, frame.classes, coeffs):
        tables[cls][lab[2:]] = float(v)
    return ErrorGeneratorDecomposition(
        tables["H"], tables["S"], tables["C"], tables["A"], float(np.linalg.norm(l - recon))
    )


# --- infidelity -----------------------------------------------------------------------------


def entanglement_infidelity(r_noise: np.ndarray) -> float:
    """``1 - Tr(Lambda) / d^2``."""
    r_noise = np.asarray(r_noise)
    return float(1.0 - np.trace(r_noise, axis1=-2, axis2=-1) / r_noise.shape[-1])


@dataclass
class InfidelityReport:
    eps_ent: float
    eps_J: float
    theta_J_sq: float
    contributions: list[tuple[str, float]]

    def top(self, k: int = 6) -> list[tuple[str, float]]:
        return self.contributions[:k]


def infidelity_report(r_noise: np.ndarray) -> InfidelityReport:
    dec = decompose_generator(error_generator(r_noise))
    contributions = [(f"H_{p}", h * h) for p, h in dec.h.items()] + [(f"S_{p}", s) for p, s in dec.s.items()]
    contributions.sort(key=lambda kv: abs(kv[1]), reverse=True)
    return InfidelityReport(
        eps_ent=entanglement_infidelity(r_noise),
        eps_J=float(sum(dec.s.values())),
        theta_J_sq=float(sum(h * h for h in dec.h.values())),
        contributions=contributions,
    )
