"""Classification error of linear directions: exact Gaussian formula, the
two-sided eigenvalue bracket, Monte Carlo for any noise law, and phase-transition
summaries."""
import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erfc

from .errors import ConfigurationError, ContractViolation
from .rng import stream

ASYMPTOTIC_FROM = 8.0
MC_CHUNK_ELEMENTS = 1 << 22

__all__ = [
    "MisalignedDirectionWarning",
    "kappa",
    "log_kappa",
    "exact_gaussian_error",
    "gaussian_bracket",
    "mc_error",
    "mc_error_fn",
    "phase_summary",
    "bayes_error",
    "ErrorReport",
    "error_report",
]


class MisalignedDirectionWarning(UserWarning):
    """<w, mu> <= 0: the direction is on the wrong side of the Bayes rule."""


def _tail_series(t):
    # sum_k (-1)^k (2k-1)!! / t^{2k}, truncated at its smallest term
    s, term, k = 1.0, 1.0, 1
    inv = 1.0 / (t * t)
    while True:
        nxt = -term * (2 * k - 1) * inv
        if abs(nxt) >= abs(term) or abs(nxt) < 1e-17 * abs(s):
            break
        s += nxt
        term = nxt
        k += 1
    return s


def log_kappa(t):
    """log P(xi >= t) for xi ~ N(0, 1)."""
    t = float(t)
    if t > ASYMPTOTIC_FROM:
        return -0.5 * t * t - math.log(t) - 0.5 * math.log(2 * math.pi) + math.log(_tail_series(t))
    return math.log(0.5 * erfc(t / math.sqrt(2)))


def _kappa_scalar(t):
    t = float(t)
    if math.isnan(t):
        return math.nan
    if t > ASYMPTOTIC_FROM:
        return math.exp(log_kappa(t))
    return 0.5 * float(erfc(t / math.sqrt(2)))


def kappa(t):
    """Standard normal upper tail; uses the asymptotic series beyond t = 8."""
    if np.ndim(t) == 0:
        return _kappa_scalar(t)
    return np.vectorize(_kappa_scalar, otypes=[float])(t)


def _sigma(sigma_spec):
    if isinstance(sigma_spec, dict):
        from .mixture import SigmaSpec
        return SigmaSpec.from_dict(sigma_spec)
    return sigma_spec


def exact_gaussian_error(w, mu, sigma_spec):
    """P(<w, y x> <= 0) = kappa(<w, mu> / ||Sigma^{1/2} w||) under Gaussian noise."""
    w = np.asarray(w, dtype=float)
    mu = np.asarray(mu, dtype=float)
    s = _sigma(sigma_spec)
    den = math.sqrt(s.quad(w))
    if den == 0:
        raise ContractViolation("w has zero noise variance; error undefined")
    dot = float(w @ mu)
    if dot <= 0:
        warnings.warn(f"<w, mu> = {dot:.3g} <= 0", MisalignedDirectionWarning, stacklevel=2)
    return kappa(dot / den)


@dataclass
class Bracket:
    lower: float
    upper: float


def gaussian_bracket(w, mu, sigma_spec):
    """lower = kappa(beta_min^{-1/2} r), upper = kappa(beta_max^{-1/2} r) with r = <w,mu>/||w||.

    Since kappa is decreasing, lower <= exact_gaussian_error <= upper.
    """
    w = np.asarray(w, dtype=float)
    nw = float(np.linalg.norm(w))
    if nw == 0:
        raise ContractViolation("w must be nonzero")
    s = _sigma(sigma_spec)
    bmin, bmax = s.eig_range(w.size)
    r = float(w @ np.asarray(mu, dtype=float)) / nw
    return Bracket(lower=kappa(r / math.sqrt(bmin)), upper=kappa(r / math.sqrt(bmax)))


@dataclass
class MCEstimate:
    estimate: float
    stderr: float
    n_samples: int
    ties: int


def mc_error_fn(score, spec, n_samples, seed, workers=1):
    """Fraction of fresh draws with y * score(x) <= 0 (ties count as errors).

    Samples are drawn in fixed chunks, each from its own stream, so the result
    does not depend on ``workers``.
    """
    n_samples = int(n_samples)
    if n_samples < 1:
        raise ContractViolation("need at least one sample")
    rows = max(1, min(n_samples, MC_CHUNK_ELEMENTS // max(spec.p, 1)))
    bounds = [(k, min(rows, n_samples - k * rows)) for k in range(-(-n_samples // rows))]

    def run(chunk):
        k, size = chunk
        rng = stream(seed, "mc", k)
        y = 2.0 * rng.integers(0, 2, size=size).astype(float) - 1.0
        xi = spec.noise_law.sample(rng, (size, spec.p))
        x = spec.sigma_spec.half_apply(xi) + np.multiply.outer(y, spec.mu)
        v = y * score(x)
        return int(np.sum(v <= 0)), int(np.sum(v == 0))

    if workers > 1 and len(bounds) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    errs = sum(p[0] for p in parts)
    ties = sum(p[1] for p in parts)
    est = errs / n_samples
    return MCEstimate(est, math.sqrt(est * (1 - est) / n_samples), n_samples, ties)


def mc_error(w, spec, n_samples, seed, workers=1):
    w = np.asarray(w, dtype=float)
    if w.size != spec.p:
        raise ContractViolation(f"w has length {w.size}, expected {spec.p}")
    if n_samples < 1000:
        raise ContractViolation("mc_error needs at least 1000 samples")
    return mc_error_fn(lambda x: x @ w, spec, n_samples, seed, workers)


@dataclass
class PhaseSummary:
    regime: str
    exponent: float | None


def phase_summary(n, norm_mu_sq, R, psi2_norm):
    if not (n > 0 and R > 0 and norm_mu_sq >= 0):
        raise ContractViolation("need n, R > 0 and norm_mu_sq >= 0")
    snr = n * norm_mu_sq
    regime = "weak" if snr <= R else "strong"
    if psi2_norm is None:
        return PhaseSummary(regime, None)
    return PhaseSummary(regime, n * norm_mu_sq**2 / (psi2_norm**2 * (snr + R)))


def bayes_error(mu, sigma_spec):
    s = _sigma(sigma_spec)
    mu = np.asarray(mu, dtype=float)
    bmin, _ = s.eig_range(mu.size)
    if not bmin > 0:
        raise ConfigurationError("covariance is singular")
    return kappa(math.sqrt(s.inv_quad(mu)))


@dataclass
class ErrorReport:
    exact_gaussian: float | None
    mc_estimate: float | None
    mc_stderr: float | None
    mc_samples: int
    mc_ties: int
    margin_ratio: float
    sigma_margin_ratio: float
    bound_exponent: float | None
    kappa_upper: float
    kappa_lower: float
    bracket_holds: bool | None
    misaligned: bool
    pm_bound_shape: float | None
    bayes_error: float
    regime: str

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def csv_row(self):
        return {k: v for k, v in self.to_dict().items()}


def error_report(w, spec, n, R=None, mc_samples=0, seed=0, workers=1):
    """Every error quantity for direction ``w`` on the population of ``spec``.

    ``n`` is the training sample size entering the bound exponent.
    """
    w = np.asarray(w, dtype=float)
    s = spec.sigma_spec
    mu = spec.mu
    if R is None:
        R = s.trace(spec.p)
    dot = float(w @ mu)
    nw = float(np.linalg.norm(w))
    sn = math.sqrt(s.quad(w))
    mu2 = float(mu @ mu)
    law = spec.noise_law
    exact = None
    if law.kind == "gaussian":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MisalignedDirectionWarning)
            exact = exact_gaussian_error(w, mu, s)
    br = gaussian_bracket(w, mu, s)
    mc = mc_error(w, spec, mc_samples, seed, workers) if mc_samples else None
    ph = phase_summary(n, mu2, R, law.psi2)
    pm = None
    if law.psi2 is None and mu2 > 0:
        pm = s.eig_range(spec.p)[1] * (1 / mu2 + R / (n * mu2**2))
    return ErrorReport(
        exact_gaussian=exact,
        mc_estimate=None if mc is None else mc.estimate,
        mc_stderr=None if mc is None else mc.stderr,
        mc_samples=0 if mc is None else mc.n_samples,
        mc_ties=0 if mc is None else mc.ties,
        margin_ratio=dot / nw,
        sigma_margin_ratio=dot / sn,
        bound_exponent=ph.exponent,
        kappa_upper=br.upper,
        kappa_lower=br.lower,
        bracket_holds=None if exact is None else bool(br.lower <= exact + 1e-15 and exact <= br.upper + 1e-15),
        misaligned=dot <= 0,
        pm_bound_shape=pm,
        bayes_error=bayes_error(mu, s),
        regime=ph.regime,
    )
