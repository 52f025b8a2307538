"""The predicted limit direction of GD.

In the activated regime the network is linear in vec(W) over the transformed
samples x~_i, so the limit direction is the max-margin solution in that space.
When every sample is a support vector it coincides with the min-norm
interpolator X~^T (X~ X~^T)^{-1} y, which only needs the n x n block Gram matrix.
"""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ContractViolation, DegenerateDataError, SeparabilityError, SolverFailure
from .network import NeuronSplit, phi, transformed_samples
from .regime import measure_tilde_events
from .rng import stream

COND_LIMIT = 1e14

__all__ = [
    "BlockGram",
    "LimitDirection",
    "block_diagonals",
    "build_block_gram",
    "min_norm_direction",
    "qp_oracle",
    "constraint_values",
    "a_matrix",
    "binv_y_ainv",
    "a_matrix_inverse_action",
    "d_value",
    "d_bounds",
    "direction_diagnostics",
    "limit_output",
    "decision_boundary_check",
    "boundary_agreement",
    "equivalence_failure_probe",
    "block_vector",
    "gram_lemma_checks",
    "inverse_perturbation_check",
]


def _as_split(q_plus, m=None):
    if isinstance(q_plus, NeuronSplit):
        return q_plus
    if m is None:
        raise ContractViolation("q_plus must be a NeuronSplit or come with m")
    return NeuronSplit.from_q(q_plus, m)


def block_diagonals(y, gamma, split):
    """Diagonals of B+, B- and B for labels ``y``."""
    y = np.asarray(y, dtype=float)
    bp = np.where(y > 0, 1.0, gamma)
    bm = np.where(y > 0, gamma, 1.0)
    qp, qm = float(split.q_plus), float(split.q_minus)
    b = np.where(y > 0, math.sqrt(qp + gamma**2 * qm), math.sqrt(qm + gamma**2 * qp))
    return bp, bm, b


@dataclass(eq=False)
class BlockGram:
    gram: np.ndarray
    b_plus_diag: np.ndarray
    b_minus_diag: np.ndarray
    b_diag: np.ndarray
    split: NeuronSplit
    gamma: float

    @property
    def q_plus(self):
        return self.split.q_plus

    @property
    def q_minus(self):
        return self.split.q_minus


def build_block_gram(data, gamma, q_plus, m=None):
    """Gram matrix of the transformed samples, q+ B+ X X^T B+ + q- B- X X^T B-."""
    split = _as_split(q_plus, m)
    if not 0 < gamma <= 1:
        raise ContractViolation("gamma must lie in (0, 1]")
    bp, bm, b = block_diagonals(data.y, gamma, split)
    K = data.X @ data.X.T
    qp, qm = float(split.q_plus), float(split.q_minus)
    G = K * (qp * np.outer(bp, bp) + qm * np.outer(bm, bm))
    G = 0.5 * (G + G.T)
    return BlockGram(G, bp, bm, b, split, float(gamma))


@dataclass(eq=False)
class LimitDirection:
    w_plus: np.ndarray
    w_minus: np.ndarray
    w_bar: np.ndarray
    sv_certificate: np.ndarray
    dual_coef: np.ndarray
    k1: float
    k2: float
    d_value: float
    method: str
    split: NeuronSplit
    gamma: float
    condition: float = math.nan
    info: dict = field(default_factory=dict)

    @property
    def certificate_positive(self):
        return bool(np.all(self.sv_certificate > 0))

    def to_dict(self):
        return {
            "method": self.method,
            "gamma": self.gamma,
            "m": self.split.m,
            "j_plus": self.split.j_plus,
            "w_plus": self.w_plus.tolist(),
            "w_minus": self.w_minus.tolist(),
            "w_bar": self.w_bar.tolist(),
            "sv_certificate": self.sv_certificate.tolist(),
            "sv_certificate_min": float(self.sv_certificate.min()),
            "k1": self.k1,
            "k2": self.k2,
            "d_value": self.d_value,
            "condition": self.condition,
            **{k: v for k, v in self.info.items() if np.isscalar(v)},
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def certificate_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "certificate"])
            for i, v in enumerate(self.sv_certificate):
                w.writerow([i, format(float(v), ".17g")])


def _assemble(data, split, gamma, c, method, cert, R=None, **info):
    bp, bm, _ = block_diagonals(data.y, gamma, split)
    sm = math.sqrt(split.m)
    X, y = data.X, data.y
    w_plus = X.T @ (bp * c) / sm
    w_minus = -(X.T @ (bm * c)) / sm
    w_bar = (split.j_plus / sm) * w_plus - (split.j_minus / sm) * w_minus
    qp, qm = float(split.q_plus), float(split.q_minus)
    v = (qp * bp + qm * bm) * c
    k1 = float(v @ y) ** 2
    k2 = float(v @ v)
    if R is None:
        R = data.spec.sigma_spec.trace(data.p) if data.spec is not None else float(np.mean(np.sum(X**2, 1)))
    mu2 = float(data.mu @ data.mu) if data.spec is not None else 0.0
    dv = d_value(data.n, data.n_plus, mu2, R, gamma, split)
    return LimitDirection(w_plus, w_minus, w_bar, cert, c, k1, k2, dv, method, split,
                          float(gamma), info=info)


def min_norm_direction(data, bg, R=None):
    """Min-norm solution via Cholesky on the block Gram matrix.

    A singular (or numerically singular) Gram matrix raises DegenerateDataError;
    no pseudo-inverse fallback.
    """
    G = bg.gram
    cond = float(np.linalg.cond(G))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise DegenerateDataError(f"block Gram matrix is singular (condition {cond:.3g})", condition=cond)
    try:
        cf = sla.cho_factor(G, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DegenerateDataError(f"block Gram matrix is not positive definite: {exc}", condition=cond) from exc
    c = sla.cho_solve(cf, data.y)
    ld = _assemble(data, bg.split, bg.gamma, c, "closed_form_ls", data.y * c, R=R)
    ld.condition = cond
    return ld


def qp_oracle(data, gamma, q_plus, m=None, lambda0=None, seed=None, tol=1e-9, max_updates=10**6):
    """Solve the max-margin problem over all of vec(W) by dual coordinate ascent.

    The dual is max sum(lam) - lam^T Q lam / 2 over lam >= 0 with
    Q = diag(y) X~ X~^T diag(y), built from materialized transformed samples so
    it shares no code path with :func:`build_block_gram`.  Stops once the KKT
    residual is at most ``tol``.  ``seed`` draws a random positive dual start.
    """
    split = _as_split(q_plus, m)
    y = data.y
    n = data.n
    Xt = transformed_samples(data.X, y, split.signs(), gamma)
    Q = (y[:, None] * Xt) @ (y[:, None] * Xt).T
    diag = np.diag(Q).copy()
    if np.any(diag <= 0):
        raise SeparabilityError("a transformed sample is zero; constraint cannot be met")
    if lambda0 is not None:
        lam = np.array(lambda0, dtype=float)
    elif seed is not None:
        lam = stream(seed, "dual_start").uniform(0.0, 2.0, size=n) / diag
    else:
        lam = np.zeros(n)
    lam = np.maximum(lam, 0.0)
    g = 1.0 - Q @ lam
    updates = 0
    resid = math.inf
    scale_cap = 1e12 / float(diag.min())
    while updates < max_updates:
        for i in range(n):
            new = max(0.0, lam[i] + g[i] / diag[i])
            delta = new - lam[i]
            if delta != 0.0:
                lam[i] = new
                g -= delta * Q[:, i]
        updates += n
        # fresh gradient each sweep to stop drift from accumulating
        g = 1.0 - Q @ lam
        resid = float(np.max(np.where(lam > 0, np.abs(g), np.maximum(g, 0.0))))
        if resid <= tol:
            break
        if lam.max() > scale_cap:
            raise SeparabilityError("dual multipliers diverge: data not separable in transformed space")
    else:
        raise SolverFailure(f"dual coordinate ascent stopped at KKT residual {resid:.3e}", residual=resid)
    w = Xt.T @ (lam * y)
    Wm = w.reshape(split.m, data.p).T
    signs = split.signs()
    w_plus = Wm[:, signs > 0].mean(axis=1) if split.j_plus else np.zeros(data.p)
    w_minus = Wm[:, signs < 0].mean(axis=1) if split.j_minus else np.zeros(data.p)
    sm = math.sqrt(split.m)
    ld = _assemble(data, split, gamma, lam * y, "qp_oracle", lam.copy(),
                   kkt_residual=resid, updates=updates,
                   objective=float(split.j_plus * w_plus @ w_plus + split.j_minus * w_minus @ w_minus))
    # the weights come straight from the primal map, not from the block formulas
    ld.w_plus, ld.w_minus = w_plus, w_minus
    ld.w_bar = (split.j_plus / sm) * w_plus - (split.j_minus / sm) * w_minus
    return ld


def block_vector(ld):
    """(w+, w-) restricted to the blocks that have neurons, concatenated.

    An empty block is not a variable of the max-margin problem, so it is left
    out when comparing solutions.
    """
    parts = []
    if ld.split.j_plus:
        parts.append(ld.w_plus)
    if ld.split.j_minus:
        parts.append(ld.w_minus)
    return np.concatenate(parts)


def constraint_values(X, y, w_plus, w_minus, split, gamma):
    """Left sides of the margin constraints (value 1 means active)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    sm = math.sqrt(split.m)
    up, um = X @ w_plus, X @ w_minus
    pos = (split.j_plus / sm) * up - gamma * (split.j_minus / sm) * um
    neg = (split.j_minus / sm) * um - gamma * (split.j_plus / sm) * up
    return np.where(y > 0, pos, neg)


# --- the A matrix and its closed forms --------------------------------------

def a_matrix(y, norm_mu_sq, R, gamma, split):
    bp, bm, b = block_diagonals(y, gamma, split)
    y = np.asarray(y, dtype=float)
    qp, qm = float(split.q_plus), float(split.q_minus)
    u, v = bp * y / b, bm * y / b
    return norm_mu_sq * (qp * np.outer(u, u) + qm * np.outer(v, v)) + R * np.eye(y.size)


def d_value(n, n_plus, norm_mu_sq, R, gamma, split):
    qp, qm = float(split.q_plus), float(split.q_minus)
    P = (qp + gamma**2 * qm) * (qm + gamma**2 * qp)
    n_minus = n - n_plus
    dP = (1 - gamma**2) ** 2 * qp * qm * n_plus * n_minus * norm_mu_sq**2 + P * (n * norm_mu_sq + R) * R
    return dP / P


def binv_y_ainv(y, norm_mu_sq, R, gamma, split):
    """Closed form of the row vector (B^{-1} y)^T A^{-1}."""
    y = np.asarray(y, dtype=float)
    n = y.size
    n_plus = int(np.sum(y > 0))
    n_minus = n - n_plus
    pos = y > 0
    qp, qm = float(split.q_plus), float(split.q_minus)
    g = gamma
    snr = n * norm_mu_sq
    s = snr / (snr + R)
    if qm == 0 or qp == 0:
        if qm == 0:
            t = s * (n_plus + n_minus / g) / n
            cp, cm = 1.0 - t, -(1.0 / g - t)
        else:
            t = s * (n_plus / g + n_minus) / n
            cp, cm = 1.0 / g - t, -(1.0 - t)
        return np.where(pos, cp, cm) / R
    Pp, Pm = qp + g**2 * qm, qm + g**2 * qp
    dP = d_value(n, n_plus, norm_mu_sq, R, g, split) * Pp * Pm
    cp = math.sqrt(Pp) * ((Pm - g) * n_minus * norm_mu_sq + Pm * R)
    cm = -math.sqrt(Pm) * ((Pp - g) * n_plus * norm_mu_sq + Pp * R)
    return np.where(pos, cp, cm) / dP


def a_matrix_inverse_action(data, R, gamma, q_plus, m=None):
    split = _as_split(q_plus, m)
    return binv_y_ainv(data.y, float(data.mu @ data.mu), R, gamma, split)


def d_bounds(n, n_plus, norm_mu_sq, R, gamma, split, eps3=None):
    """The upper and lower bounds on d*(q+ + g^2 q-)(q- + g^2 q+)."""
    qp, qm = float(split.q_plus), float(split.q_minus)
    P = (qp + gamma**2 * qm) * (qm + gamma**2 * qp)
    dP = d_value(n, n_plus, norm_mu_sq, R, gamma, split) * P
    if eps3 is None:
        eps3 = abs(n_plus - n / 2) / (n / 2)
    S2 = (n * norm_mu_sq + R) ** 2
    up1 = (gamma**2 + 1.25 * (1 - gamma**2) ** 2 * qp * qm) * S2
    up2 = 1.25 * split.q_gamma(gamma) * S2
    lo = (1 - eps3**2) * (1 - gamma**2) ** 2 * qp * qm / 8 * S2 + gamma**2 * R**2
    tol = 1e-12 * max(abs(dP), 1.0)
    return {"dP": dP, "upper": up1, "upper_q_gamma": up2, "lower": lo,
            "holds": bool(dP <= up1 + tol and up1 <= up2 + tol and dP >= lo - tol)}


# --- diagnostics -------------------------------------------------------------

def direction_diagnostics(ld, data, R=None):
    """K1, K2, the exact ||w_bar||^2 and <w_bar, mu>, and the two brackets comparing them."""
    if R is None:
        R = data.spec.sigma_spec.trace(data.p)
    split, gamma = ld.split, ld.gamma
    y = data.y
    mu = data.mu
    mu2 = float(mu @ mu)
    bp, bm, _ = block_diagonals(y, gamma, split)
    qp, qm = float(split.q_plus), float(split.q_minus)
    v = (qp * bp + qm * bm) * ld.dual_coef
    k1 = float(v @ y) ** 2
    k2 = float(v @ v)
    te = measure_tilde_events(data, R)
    eps = max(te["eps1"], math.sqrt(data.n) * te["eps2"])
    qg = split.q_gamma(gamma)
    wn2 = float(ld.w_bar @ ld.w_bar)
    wmu = float(ld.w_bar @ mu)
    lhs1 = abs(wn2 - (mu2 * k1 + R * k2))
    rhs1 = eps * R * k2
    act = binv_y_ainv(y, mu2, R, gamma, split)
    lhs2 = abs(wmu - mu2 * math.sqrt(k1))
    rhs2 = (qg**-0.5 / 3 * te["eps2"] * float(np.linalg.norm(act)) * R
            + 2 * qg**-2 / 3 * eps * math.sqrt(data.n) * te["eps2"])
    tol = 1e-9 * max(wn2, 1e-300)
    return {
        "k1": k1, "k2": k2, "w_bar_norm_sq": wn2, "w_bar_dot_mu": wmu,
        "eps_tilde": eps, "eps_tilde_2": te["eps2"], "R": float(R),
        "brackets": {
            "norm": {"lhs": lhs1, "rhs": rhs1, "holds": bool(lhs1 <= rhs1 + tol)},
            "dot_mu": {"lhs": lhs2, "rhs": rhs2, "applicable": bool(eps <= qg / 2),
                       "holds": bool(lhs2 <= rhs2 + 1e-9 * max(abs(wmu), mu2 * math.sqrt(k1), 1e-300))},
        },
    }


def limit_output(x, w_plus, w_minus, split, gamma):
    """f(x; W^) for W^ with columns w+ on J+ and w- on J-."""
    x = np.asarray(x, dtype=float)
    sm = math.sqrt(split.m)
    return (split.j_plus / sm) * phi(x @ w_plus, gamma) - (split.j_minus / sm) * phi(x @ w_minus, gamma)


def boundary_agreement(ld, probes):
    P = np.atleast_2d(np.asarray(probes, dtype=float))
    if P.shape[0] == 0:
        raise ContractViolation("need at least one probe")
    f = limit_output(P, ld.w_plus, ld.w_minus, ld.split, ld.gamma)
    lin = P @ ld.w_bar
    sf, sl = np.sign(f), np.sign(lin)
    return {"agree": int(np.sum(sf == sl)), "total": int(P.shape[0]),
            "ties": int(np.sum((sf == 0) | (sl == 0))), "all_agree": bool(np.all(sf == sl))}


def decision_boundary_check(ld, net_shape, probes):
    """True iff sign f(x; W^) == sign <x, w_bar> on every probe (sign(0) = 0).

    ``net_shape`` is ``{m, q_plus, gamma}``; it must match the direction.
    """
    split = _as_split(net_shape["q_plus"], net_shape["m"])
    if split != ld.split or not math.isclose(net_shape["gamma"], ld.gamma):
        raise ContractViolation("net_shape does not match the limit direction")
    return boundary_agreement(ld, probes)["all_agree"]


def equivalence_failure_probe(gamma, q_plus, mu_norm_sq, R, n, n_plus, m=None):
    """Certificate y^T (X~X~^T)^{-1} y_i e_i on idealized data X X^T = |mu|^2 y y^T + R I.

    Returns the dominant coefficients, the certificate from the closed form and
    from a dense solve, and whether some entry is negative.
    """
    split = _as_split(q_plus, m)
    qp, qm = float(split.q_plus), float(split.q_minus)
    if qp * qm == 0:
        raise ContractViolation("the probe needs both neuron signs present")
    y = np.array([1.0] * n_plus + [-1.0] * (n - n_plus))
    _, _, b = block_diagonals(y, gamma, split)
    closed = y * binv_y_ainv(y, mu_norm_sq, R, gamma, split) / b
    bp, bm, _ = block_diagonals(y, gamma, split)
    K = mu_norm_sq * np.outer(y, y) + R * np.eye(n)
    G = K * (qp * np.outer(bp, bp) + qm * np.outer(bm, bm))
    dense = y * sla.solve(G, y, assume_a="pos")
    return {
        "coef_plus": qm + gamma**2 * qp - gamma,
        "coef_minus": qp + gamma**2 * qm - gamma,
        "certificate": closed,
        "certificate_dense": dense,
        "certificate_signs": np.sign(closed).astype(int),
        "negative_entry": bool(np.any(closed < 0)),
        "q_gamma": split.q_gamma(gamma),
    }


def gram_lemma_checks(data, gamma, q_plus, m=None, R=None):
    """Measured sides of the Gram approximation inequalities for one dataset."""
    split = _as_split(q_plus, m)
    if R is None:
        R = data.spec.sigma_spec.trace(data.p)
    te = measure_tilde_events(data, R)
    eps = max(te["eps1"], math.sqrt(data.n) * te["eps2"])
    qg = split.q_gamma(gamma)
    mu2 = float(data.mu @ data.mu)
    y = data.y
    n = data.n
    bg = build_block_gram(data, gamma, split)
    A = a_matrix(y, mu2, R, gamma, split)
    b = bg.b_diag

    def opnorm(M):
        return float(np.max(np.abs(sla.eigvalsh(0.5 * (M + M.T)))))

    lhs2 = opnorm(data.X @ data.X.T - (mu2 * np.outer(y, y) + R * np.eye(n)))
    lhs3e = opnorm(bg.gram / np.outer(b, b) - A)
    out = {
        "eps_tilde": eps, "q_gamma": qg, "R": float(R),
        "gram": {"lhs": lhs2, "rhs": eps * R, "holds": bool(lhs2 <= eps * R * (1 + 1e-12) + 1e-12)},
        "ext_gram": {"lhs": lhs3e, "rhs": eps * R / qg,
                     "holds": bool(lhs3e <= eps * R / qg * (1 + 1e-12) + 1e-12)},
    }
    applicable = eps <= qg / 2
    inv = {"applicable": bool(applicable), "rhs": 2 * eps / (qg * R)}
    if applicable:
        Ginv = sla.inv(bg.gram)
        lhs3 = opnorm(np.outer(b, b) * Ginv - sla.inv(A))
        inv.update(lhs=lhs3, holds=bool(lhs3 <= inv["rhs"] * (1 + 1e-9) + 1e-15))
    out["gram_inverse"] = inv
    return out


def inverse_perturbation_check(U, V, L, s):
    """||U^{-1} - V^{-1}|| against 2 s / L, given V >= L I and ||U - V|| <= s L."""
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    if not 0 <= s <= 0.5:
        raise ContractViolation("s must lie in [0, 1/2]")
    if np.min(sla.eigvalsh(0.5 * (V + V.T))) < L * (1 - 1e-12):
        raise ContractViolation("V is not bounded below by L I")
    if np.linalg.norm(U - V, 2) > s * L * (1 + 1e-12):
        raise ContractViolation("||U - V|| exceeds s L")
    lhs = float(np.linalg.norm(np.linalg.inv(U) - np.linalg.inv(V), 2))
    rhs = 2 * s / L
    return {"lhs": lhs, "rhs": rhs, "holds": bool(lhs <= rhs * (1 + 1e-12))}
