"""Deterministic regime checks on realized data: event E, the tilde events,
rho, C_w, assumptions A1-A7 and the regime classifications built on them."""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import BridgeInapplicable, ConfigurationError, ContractViolation
from .network import NeuronSplit

E = math.e

__all__ = [
    "AssumptionFlag",
    "RegimeReport",
    "default_slack",
    "default_d_tilde",
    "measure_event_E",
    "measure_tilde_events",
    "check_assumptions",
    "check_theorem2_regime",
    "tilde_to_E_bridge",
    "format_report",
    "noise_radii",
    "rho_value",
    "c_w",
]


@dataclass
class AssumptionFlag:
    name: str
    lhs: float
    rhs: float
    relation: str
    slack: float
    passed: bool


def _flag(name, lhs, rel, rhs):
    """Evaluate ``lhs rel rhs`` literally.  Slack is oriented so slack >= 0 for a pass
    (strict relations additionally need slack > 0)."""
    lhs, rhs = float(lhs), float(rhs)
    if rel in ("<", "<="):
        slack = rhs - lhs
    else:
        slack = lhs - rhs
    if math.isnan(slack):
        slack = -math.inf
    passed = {"<": lhs < rhs, "<=": lhs <= rhs, ">": lhs > rhs, ">=": lhs >= rhs}[rel]
    return AssumptionFlag(name, lhs, rhs, rel, slack, bool(passed))


@dataclass
class RegimeReport:
    theta1: float
    theta2: float
    theta1_raw: float
    eps_tilde_1: float
    eps_tilde_2: float
    eps_tilde_3: float
    R: float
    rho: float
    r_min: float
    r_max: float
    c_w: float
    assumption_flags: dict
    condition_i: bool
    condition_ii: bool
    theorem1_condition: str
    theorem2_condition: str
    q_plus: float
    q_minus: float
    q_gamma: float
    eps_tilde: float
    # inputs the flags depend on, so the classification can be recomputed
    n: int = 0
    norm_mu_sq: float = 0.0
    gamma: float = 0.0
    alpha: float = 0.0
    sigma: float = 0.0
    m: int = 1
    j_plus: int = 0
    slack_params: dict = field(default_factory=dict)
    theorem2_details: dict = field(default_factory=dict)

    def flags_passed(self, names):
        return all(self.assumption_flags[k].passed for k in names)

    def to_dict(self):
        d = asdict(self)
        d["assumption_flags"] = {k: asdict(v) for k, v in self.assumption_flags.items()}
        return d

    def to_json(self, **kw):
        return json.dumps(_jsonable(self.to_dict()), **kw)


def _jsonable(o):
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if math.isfinite(v) else str(v)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def default_slack(gamma):
    e13 = 5 * gamma**2 / (368 * E)
    return {"eps1": e13, "eps2": 0.5, "eps3": e13}


def default_d_tilde(gamma, eps_tilde):
    return 3.0 / (8 * (1 + gamma) ** 3 * (gamma**-2 + 2 * gamma**-4 * eps_tilde))


def noise_radii(Z):
    r = np.linalg.norm(Z, axis=1)
    return float(r.min()), float(r.max())


def _cos_matrix(Z):
    r = np.linalg.norm(Z, axis=1)
    safe = np.where(r > 0, r, 1.0)
    U = Z / safe[:, None]
    U[r == 0] = 0.0
    return U, r


def _theta1_raw(Z):
    U, _ = _cos_matrix(Z)
    C = np.abs(U @ U.T)
    np.fill_diagonal(C, 0.0)
    return float(C.max()) if C.shape[0] > 1 else 0.0


def measure_event_E(data):
    """Smallest (theta1, theta2) for which event E holds on ``data``.

    Both are 0 when mu = 0 or Rmax = 0; rows with z_i = 0 contribute 0.
    """
    Z = data.require_noise()
    mu = data.mu
    nm = float(np.linalg.norm(mu))
    rmax = float(np.max(np.linalg.norm(Z, axis=1)))
    if nm == 0 or rmax == 0:
        return {"theta1": 0.0, "theta2": 0.0}
    U, _ = _cos_matrix(Z)
    theta2 = float(np.max(np.abs(U @ (mu / nm))))
    return {"theta1": min(_theta1_raw(Z), 1.0), "theta2": min(theta2, 1.0)}


def measure_tilde_events(data, R):
    if not R > 0:
        raise ContractViolation("R must be > 0")
    Z = data.require_noise()
    n = data.n
    D = Z @ Z.T - R * np.eye(n)
    ev = sla.eigvalsh(D)
    eps1 = 3 * float(np.max(np.abs(ev))) / R
    eps2 = 3 * float(np.linalg.norm(Z @ data.mu)) / R
    eps3 = abs(data.n_plus - n / 2) / (n / 2)
    return {"eps1": eps1, "eps2": eps2, "eps3": eps3}


def rho_value(sigma, m, theta2, norm_mu_sq, r_max):
    return sigma * math.sqrt(m * (1 + theta2) * (norm_mu_sq + r_max**2))


def c_w(gamma, r_min, r_max):
    if r_min == 0:
        return math.inf
    return 24 * E * gamma**-2 * r_max**2 / r_min**2


def _div(a, b):
    if b == 0:
        return math.inf if a > 0 else (0.0 if a == 0 else -math.inf)
    return a / b


def assumption_flags(*, theta1, theta2, norm_mu_sq, r_min, r_max, n, alpha, rho, gamma, slack):
    nm = math.sqrt(norm_mu_sq)
    cross = 2 * theta2 * nm * r_max + theta1 * r_max**2
    e1, e2, e3 = slack["eps1"], slack["eps2"], slack["eps3"]
    rer = rho * math.exp(rho)
    one_m = 1 - theta2
    cw = c_w(gamma, r_min, r_max)
    f = {}
    f["A1"] = _flag("A1", norm_mu_sq, ">=", cross)
    f["A2"] = _flag("A2", alpha, ">", _div(rer, gamma * one_m * (norm_mu_sq + r_min**2)))
    f["A3"] = _flag("A3", alpha * (n * norm_mu_sq + r_max**2), "<", 1.0)
    f["A4"] = _flag("A4", cross, "<=", _div(e1 * gamma * one_m * r_min**2, n * math.exp(2 * rho)))
    f["A5"] = _flag("A5", alpha, ">=", _div(rer, e2 * gamma * one_m * r_min**2))
    f["A6"] = _flag("A6", n * norm_mu_sq, "<=", e3 * r_min**2)
    f["A7"] = _flag("A7", 6 * alpha * r_max**2 * math.exp(rho), "<", 1.0)
    f["theta2_lt_1"] = _flag("theta2_lt_1", theta2, "<", 1.0)
    f["slack_sum"] = _flag("slack_sum", e1 + e2 + e3, "<", 1.0)
    f["cw_eps1"] = _flag("cw_eps1", cw * e1, "<=", 0.5)
    f["cw_eps3"] = _flag("cw_eps3", cw * e3, "<=", 0.5)
    f["theta2_le_half"] = _flag("theta2_le_half", theta2, "<=", 0.5)
    return f


COND_I = ("A1", "A2", "A3", "theta2_lt_1")
COND_II = ("A4", "A5", "A6", "A7", "slack_sum", "cw_eps1", "cw_eps3", "theta2_le_half")


def check_assumptions(data, config, net, slack=None, R=None, d_tilde=None, lam=None):
    """Evaluate every deterministic condition on ``data`` for the initial network ``net``.

    ``sigma`` is the realized max_j ||w_j(0)||.  ``R`` defaults to tr(Sigma).
    """
    gamma = net.gamma
    slack = dict(default_slack(gamma) if slack is None else slack)
    if not 0 <= slack["eps1"] <= 1:
        raise ConfigurationError("eps1 must lie in [0, 1]")
    if not 0 < slack["eps2"] <= 1:
        raise ConfigurationError("eps2 must lie in (0, 1]")
    if not 0 <= slack["eps3"] < 1:
        raise ConfigurationError("eps3 must lie in [0, 1)")
    Z = data.require_noise()
    if R is None:
        R = data.spec.sigma_spec.trace(data.p)
    mu2 = float(data.mu @ data.mu)
    th = measure_event_E(data)
    th1_raw = _theta1_raw(Z)
    te = measure_tilde_events(data, R)
    r_min, r_max = noise_radii(Z)
    sigma = float(np.max(np.linalg.norm(net.W, axis=0)))
    rho = rho_value(sigma, net.m, th["theta2"], mu2, r_max)
    flags = assumption_flags(theta1=th["theta1"], theta2=th["theta2"], norm_mu_sq=mu2,
                             r_min=r_min, r_max=r_max, n=data.n, alpha=config.alpha,
                             rho=rho, gamma=gamma, slack=slack)
    ci = all(flags[k].passed for k in COND_I)
    cii = all(flags[k].passed for k in COND_II)
    split = net.split
    qg = split.q_gamma(gamma)
    eps_t = max(te["eps1"], math.sqrt(data.n) * te["eps2"])
    rep = RegimeReport(
        theta1=th["theta1"], theta2=th["theta2"], theta1_raw=th1_raw,
        eps_tilde_1=te["eps1"], eps_tilde_2=te["eps2"], eps_tilde_3=te["eps3"],
        R=float(R), rho=rho, r_min=r_min, r_max=r_max, c_w=c_w(gamma, r_min, r_max),
        assumption_flags=flags, condition_i=ci, condition_ii=cii,
        theorem1_condition="i" if ci else ("ii" if cii else "none"),
        theorem2_condition="none",
        q_plus=float(split.q_plus), q_minus=float(split.q_minus), q_gamma=qg, eps_tilde=eps_t,
        n=data.n, norm_mu_sq=mu2, gamma=gamma, alpha=config.alpha, sigma=sigma,
        m=split.m, j_plus=split.j_plus, slack_params=slack,
    )
    t2 = check_theorem2_regime(rep, data, d_tilde=d_tilde, lam=lam)
    rep.theorem2_condition = t2["condition"]
    rep.theorem2_details = t2["details"]
    return rep


def theorem2_predicates(*, n, norm_mu_sq, R, gamma, j_plus, m, eps1, eps2, eps3, d_tilde=None, lam=None):
    """The literal inequalities of the three regimes as a dict of booleans plus constants."""
    split = NeuronSplit(j_plus, m)
    qp, qm = float(split.q_plus), float(split.q_minus)
    qg = split.q_gamma(gamma)
    eps = max(eps1, math.sqrt(n) * eps2)
    sn_eps = math.sqrt(n) * eps
    snr = n * norm_mu_sq
    lam_cap = qg / (2 * gamma * (1 - gamma))
    if lam is None:
        lam = lam_cap
    if d_tilde is None:
        d_tilde = default_d_tilde(gamma, eps)
    c_tilde = (1 - eps3) * qg**2 * (qg - gamma) / (5 * (1 + 1 / lam) ** 2)
    eps2_cap = d_tilde * math.sqrt(n) * norm_mu_sq / R
    common = {"gram_perturbation_small": eps <= qg / 2}
    p = {
        "i": {
            "single_block": qp * qm == 0,
            "weak_signal": snr < gamma / (1 + (1 + gamma) * eps3) * R,
            "sqrt_n_eps": sn_eps <= gamma**3 / 4,
            "eps2_small": eps2 <= eps2_cap,
            **common,
        },
        "ii": {
            "two_blocks": qp * qm != 0,
            "lambda_admissible": lam <= lam_cap,
            "weak_signal": snr <= lam * R,
            "sqrt_n_eps": sn_eps <= qg**2 / (5 * (1 + lam) ** 2),
            "balanced": eps3 <= 0.5,
            "eps2_small": eps2 <= eps2_cap,
            **common,
        },
        "iii": {
            "q_gamma_gt_gamma": qg > gamma,
            "strong_signal": snr >= lam * R,
            "sqrt_n_eps": snr > 0 and sn_eps <= c_tilde * R / snr,
            "balanced": eps3 <= 0.5,
            **common,
        },
    }
    consts = {
        "lambda": lam, "d_tilde": d_tilde, "c_tilde": c_tilde, "q_gamma": qg,
        "eps_tilde": eps, "sqrt_n_eps_tilde": sn_eps, "n_mu_sq_over_R": snr / R,
        # the simplified constants quoted in the summary statement, for reference
        "alt_sqrt_n_eps_cap_ii": qg**2 / 20,
        "alt_sqrt_n_eps_cap_iii": (qg**2 * (qg - gamma) / 40 * R / snr) if snr > 0 else math.inf,
    }
    return p, consts


def check_theorem2_regime(report, data=None, d_tilde=None, lam=None):
    preds, consts = theorem2_predicates(
        n=report.n, norm_mu_sq=report.norm_mu_sq, R=report.R, gamma=report.gamma,
        j_plus=report.j_plus, m=report.m, eps1=report.eps_tilde_1, eps2=report.eps_tilde_2,
        eps3=report.eps_tilde_3, d_tilde=d_tilde, lam=lam)
    cond = "none"
    for name in ("i", "ii", "iii"):
        if all(preds[name].values()):
            cond = name
            break
    return {"condition": cond, "details": {"predicates": preds, **consts}}


def recompute_theorem1_condition(record):
    """Convergence-condition label (i, ii or none) from stored scalars (dict with RegimeReport field names)."""
    flags = assumption_flags(
        theta1=record["theta1"], theta2=record["theta2"], norm_mu_sq=record["norm_mu_sq"],
        r_min=record["r_min"], r_max=record["r_max"], n=record["n"], alpha=record["alpha"],
        rho=record["rho"], gamma=record["gamma"], slack=record["slack_params"])
    if all(flags[k].passed for k in COND_I):
        return "i"
    if all(flags[k].passed for k in COND_II):
        return "ii"
    return "none"


def recompute_theorem2_condition(record):
    preds, _ = theorem2_predicates(
        n=record["n"], norm_mu_sq=record["norm_mu_sq"], R=record["R"], gamma=record["gamma"],
        j_plus=record["j_plus"], m=record["m"], eps1=record["eps_tilde_1"],
        eps2=record["eps_tilde_2"], eps3=record["eps_tilde_3"])
    for name in ("i", "ii", "iii"):
        if all(preds[name].values()):
            return name
    return "none"


def tilde_to_E_bridge(eps1, eps2, R, norm_mu):
    if eps1 > 0.5:
        raise BridgeInapplicable(f"eps1={eps1} exceeds 1/2")
    theta2 = 0.0 if norm_mu == 0 else eps2 * math.sqrt(R) / (2 * norm_mu)
    return {"theta1": eps1 / 2, "theta2": theta2}


def format_report(report):
    lines = [f"{'check':<16}{'lhs':>14} {'rel':^4}{'rhs':>14}{'slack':>14}  pass"]
    for f in report.assumption_flags.values():
        lines.append(f"{f.name:<16}{f.lhs:>14.6g} {f.relation:^4}{f.rhs:>14.6g}{f.slack:>14.6g}  "
                     f"{'yes' if f.passed else 'no'}")
    lines.append("")
    lines.append(f"theta1={report.theta1:.6g} theta2={report.theta2:.6g} rho={report.rho:.6g} "
                 f"r_min={report.r_min:.6g} r_max={report.r_max:.6g} C_w={report.c_w:.6g}")
    lines.append(f"eps~1={report.eps_tilde_1:.6g} eps~2={report.eps_tilde_2:.6g} "
                 f"eps~3={report.eps_tilde_3:.6g} eps~={report.eps_tilde:.6g} R={report.R:.6g}")
    lines.append(f"q+={report.q_plus:.6g} q-={report.q_minus:.6g} q_gamma={report.q_gamma:.6g}")
    lines.append(f"theorem1 condition: {report.theorem1_condition}   "
                 f"theorem2 condition: {report.theorem2_condition}")
    return "\n".join(lines)
