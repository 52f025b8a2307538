"""Two-layer leaky-ReLU network with fixed second layer, trained by full-batch GD
on the exponential loss."""
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, ContractViolation, NumericalFailure
from .rng import stream

log = logging.getLogger(__name__)

MARGIN_ABORT = 700.0

__all__ = [
    "NeuronSplit",
    "NetworkState",
    "TrainConfig",
    "TrainTrace",
    "phi",
    "zeta",
    "forward",
    "margins",
    "empirical_loss",
    "log_empirical_loss",
    "loss_gradient",
    "gd_step",
    "init_network",
    "train",
    "activation_report",
    "transformed_samples",
    "sigma_max_tilde_bound",
]


@dataclass(frozen=True)
class NeuronSplit:
    """Exact sign split of the second layer: ``j_plus`` of ``m`` neurons are positive."""

    j_plus: int
    m: int

    def __post_init__(self):
        if int(self.m) < 1 or not 0 <= int(self.j_plus) <= int(self.m):
            raise ConfigurationError(f"invalid neuron split {self.j_plus}/{self.m}")
        object.__setattr__(self, "j_plus", int(self.j_plus))
        object.__setattr__(self, "m", int(self.m))

    @classmethod
    def from_q(cls, q_plus, m):
        """Split from a fraction; ``q_plus * m`` must be an integer."""
        q = Fraction(q_plus).limit_denominator(10**9) if isinstance(q_plus, float) else Fraction(q_plus)
        jp = q * m
        if jp.denominator != 1:
            raise ConfigurationError(f"q_plus={q_plus} is not a multiple of 1/{m}")
        return cls(int(jp), m)

    @classmethod
    def from_signs(cls, signs):
        signs = np.asarray(signs)
        return cls(int(np.sum(signs > 0)), signs.size)

    @property
    def j_minus(self):
        return self.m - self.j_plus

    @property
    def q_plus(self):
        return Fraction(self.j_plus, self.m)

    @property
    def q_minus(self):
        return Fraction(self.j_minus, self.m)

    def q_gamma(self, gamma):
        qp, qm = float(self.q_plus), float(self.q_minus)
        return min(qp + gamma**2 * qm, qm + gamma**2 * qp)

    def signs(self):
        return np.array([1.0] * self.j_plus + [-1.0] * self.j_minus)


@dataclass(frozen=True, eq=False)
class NetworkState:
    W: np.ndarray
    signs: np.ndarray
    gamma: float
    step: int = 0

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        if W.ndim != 2:
            raise ContractViolation("W must be a p x m matrix")
        s = np.array(self.signs, dtype=float).ravel()
        if s.size != W.shape[1]:
            raise ContractViolation(f"{s.size} signs for {W.shape[1]} neurons")
        if not np.all(np.abs(s) == 1):
            raise ConfigurationError("signs must be +1 or -1")
        if not 0 < self.gamma < 1:
            raise ConfigurationError("gamma must lie in (0, 1)")
        W.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "signs", s)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def m(self):
        return self.W.shape[1]

    @property
    def p(self):
        return self.W.shape[0]

    @property
    def a(self):
        return self.signs / math.sqrt(self.m)

    @property
    def split(self):
        return NeuronSplit.from_signs(self.signs)

    def with_W(self, W, step=None):
        return NetworkState(W, self.signs, self.gamma, self.step if step is None else step)


@dataclass(frozen=True, eq=False)
class TrainConfig:
    alpha: float
    sigma_init: float = 0.0
    T: int = 0
    init_scheme: str = "uniform_sphere_scaled"
    W0: np.ndarray | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be > 0")
        if not self.sigma_init >= 0:
            raise ConfigurationError("sigma_init must be >= 0")
        if int(self.T) < 0:
            raise ConfigurationError("T must be >= 0")
        if self.init_scheme not in ("uniform_sphere_scaled", "fixed_matrix"):
            raise ConfigurationError(f"unknown init_scheme {self.init_scheme!r}")
        if self.init_scheme == "fixed_matrix" and self.W0 is None:
            raise ConfigurationError("fixed_matrix initialization needs W0")
        object.__setattr__(self, "T", int(self.T))

    def to_dict(self):
        d = {"alpha": self.alpha, "sigma_init": self.sigma_init, "T": self.T,
             "init_scheme": self.init_scheme}
        if self.W0 is not None:
            d["W0"] = np.asarray(self.W0).tolist()
        return d


TRACE_COLUMNS = ("t", "loss", "all_activated", "min_margin", "loss_ratio_max", "cos_plus", "cos_minus")


@dataclass(eq=False)
class TrainTrace:
    t: np.ndarray
    loss: np.ndarray
    all_activated: np.ndarray
    min_margin: np.ndarray
    loss_ratio_max: np.ndarray
    cos_plus: np.ndarray
    cos_minus: np.ndarray
    final_state: NetworkState | None = None
    stop_reason: str = "budget"
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.t.size)

    def rows(self):
        for k in range(len(self)):
            yield (int(self.t[k]), float(self.loss[k]), bool(self.all_activated[k]),
                   float(self.min_margin[k]), float(self.loss_ratio_max[k]),
                   float(self.cos_plus[k]), float(self.cos_minus[k]))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for row in self.rows():
                w.writerow([row[0], format(row[1], ".17g"), int(row[2])]
                           + [format(v, ".17g") for v in row[3:]])

    def summary(self):
        if len(self) == 0:
            return {"steps": 0, "stop_reason": self.stop_reason}
        t = self.t.astype(float)
        tl = t * self.loss
        half = t >= t[-1] / 2
        return {
            "steps": len(self),
            "stop_reason": self.stop_reason,
            "final_loss": float(self.loss[-1]),
            "all_activated_every_step": bool(np.all(self.all_activated)),
            "first_inactive_step": (int(self.t[~self.all_activated][0])
                                    if not np.all(self.all_activated) else None),
            "final_min_margin": float(self.min_margin[-1]),
            "max_loss_ratio": float(np.max(self.loss_ratio_max)),
            "final_cos_plus": _nan_to_none(self.cos_plus[-1]),
            "final_cos_minus": _nan_to_none(self.cos_minus[-1]),
            "t_loss_final": float(tl[-1]),
            "t_loss_ratio_second_half": float(tl[half].max() / tl[half].min()),
        }

    def to_json(self, **kw):
        return json.dumps(self.summary(), **kw)


def _nan_to_none(v):
    v = float(v)
    return None if math.isnan(v) else v


def phi(u, gamma):
    u = np.asarray(u, dtype=float)
    return np.where(u >= 0, u, gamma * u)


def zeta(u, gamma):
    """Slope of phi; the subgradient at 0 is taken as 1."""
    return np.where(np.asarray(u) >= 0, 1.0, gamma)


def forward(state, x):
    """Network output for one input (1-D) or a batch of rows (2-D)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != state.p or x.ndim > 2:
        raise ContractViolation(f"input has dimension {x.shape[-1]}, network expects {state.p}")
    return phi(x @ state.W, state.gamma) @ state.a


def margins(state, data):
    _check_dims(state, data)
    return data.y * forward(state, data.X)


def _check_dims(state, data):
    if data.p != state.p:
        raise ContractViolation(f"data dimension {data.p} != network dimension {state.p}")


def log_empirical_loss(state, data):
    return float(logsumexp(-margins(state, data)))


def _loss_from_margins(mg):
    if np.min(mg) < -MARGIN_ABORT:
        lv = float(logsumexp(-mg))
        try:
            return math.exp(lv)
        except OverflowError:
            return math.inf
    return float(np.sum(np.exp(-mg)))


def empirical_loss(state, data):
    return _loss_from_margins(margins(state, data))


def _gradient(W, a, gamma, X, y):
    S = X @ W
    mg = y * (phi(S, gamma) @ a)
    g = np.exp(-mg) * y
    G = g[:, None] * zeta(S, gamma) * a[None, :]
    return -(X.T @ G), S, mg


def loss_gradient(state, data):
    _check_dims(state, data)
    return _gradient(state.W, state.a, state.gamma, data.X, data.y)[0]


def gd_step(state, data, alpha):
    if not alpha >= 0:
        raise ContractViolation("alpha must be non-negative")
    grad = loss_gradient(state, data)
    if not np.all(np.isfinite(grad)):
        raise NumericalFailure("non-finite gradient", step=state.step)
    return state.with_W(state.W - alpha * grad, step=state.step + 1)


def init_network(p, signs, gamma, config, seed=0):
    """Initial state per ``config.init_scheme``.

    ``uniform_sphere_scaled`` puts w_j uniformly on the sphere of radius
    sigma*u_j with u_j ~ U[0.5, 1], so max_j ||w_j|| <= sigma.
    """
    signs = np.asarray(signs, dtype=float)
    if config.init_scheme == "fixed_matrix":
        W0 = np.array(config.W0, dtype=float)
        if W0.shape != (p, signs.size):
            raise ContractViolation(f"W0 has shape {W0.shape}, expected {(p, signs.size)}")
        return NetworkState(W0, signs, gamma)
    rng = stream(seed, "init")
    G = rng.standard_normal((p, signs.size))
    radii = config.sigma_init * rng.uniform(0.5, 1.0, size=signs.size)
    norms = np.linalg.norm(G, axis=0)
    return NetworkState(G * (radii / norms), signs, gamma)


def _block_cos(W, signs, w_plus, w_minus):
    out = []
    for mask, ref in ((signs > 0, w_plus), (signs < 0, w_minus)):
        if not mask.any() or ref is None:
            out.append(math.nan)
            continue
        v = W[:, mask].mean(axis=1)
        den = np.linalg.norm(v) * np.linalg.norm(ref)
        out.append(float(v @ ref / den) if den > 0 else math.nan)
    return out


def train(data, config, state0, reference=None):
    """Run ``config.T`` GD steps from ``state0`` and record monitors after each step.

    ``reference`` is anything with ``w_plus``/``w_minus`` attributes (e.g. a
    LimitDirection); per-block cosines are NaN without it.  Training stops
    early, with ``stop_reason='margin_overflow'``, once some margin exceeds 700.
    """
    _check_dims(state0, data)
    X, y = data.X, data.y
    a, gamma, signs = state0.a, state0.gamma, state0.signs
    T = config.T
    wp = None if reference is None else np.asarray(reference.w_plus, dtype=float)
    wm = None if reference is None else np.asarray(reference.w_minus, dtype=float)
    cols = {k: [] for k in TRACE_COLUMNS}
    W = np.array(state0.W)
    step0 = state0.step
    reason = "budget"
    grad, S, mg = _gradient(W, a, gamma, X, y)
    for k in range(1, T + 1):
        if not np.all(np.isfinite(grad)):
            raise NumericalFailure("non-finite gradient", step=step0 + k - 1)
        W = W - config.alpha * grad
        grad, S, mg = _gradient(W, a, gamma, X, y)
        if not np.all(np.isfinite(mg)):
            raise NumericalFailure("non-finite margins", step=step0 + k)
        cols["t"].append(step0 + k)
        cols["loss"].append(_loss_from_margins(mg))
        cols["all_activated"].append(bool(np.all(a[None, :] * y[:, None] * S > 0)))
        cols["min_margin"].append(float(mg.min()))
        cols["loss_ratio_max"].append(math.exp(float(mg.max() - mg.min())) if mg.size > 1 else 1.0)
        cp, cm = _block_cos(W, signs, wp, wm)
        cols["cos_plus"].append(cp)
        cols["cos_minus"].append(cm)
        if mg.max() > MARGIN_ABORT:
            reason = "margin_overflow"
            log.warning("training stopped at step %d: margin %.1f exceeds %.0f",
                        step0 + k, mg.max(), MARGIN_ABORT)
            break
    final = state0.with_W(W, step=step0 + len(cols["t"]))
    return TrainTrace(
        t=np.array(cols["t"], dtype=int),
        loss=np.array(cols["loss"], dtype=float),
        all_activated=np.array(cols["all_activated"], dtype=bool),
        min_margin=np.array(cols["min_margin"], dtype=float),
        loss_ratio_max=np.array(cols["loss_ratio_max"], dtype=float),
        cos_plus=np.array(cols["cos_plus"], dtype=float),
        cos_minus=np.array(cols["cos_minus"], dtype=float),
        final_state=final,
        stop_reason=reason,
    )


def activation_report(state, data):
    _check_dims(state, data)
    prod = state.a[None, :] * data.y[:, None] * (data.X @ state.W)
    bad = np.argwhere(~(prod > 0))
    return {"all_activated": bad.size == 0, "violators": [tuple(map(int, ij)) for ij in bad]}


def transformed_samples(X, y, signs, gamma):
    """Rows x~_i in R^{mp} with blocks a_j zeta(a_j y_i) x_i (block j = column j of W)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    a = np.asarray(signs, dtype=float) / math.sqrt(len(signs))
    coef = a[None, :] * zeta(np.multiply.outer(y, a), gamma)
    return (coef[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)


def sigma_max_tilde_bound(data, theta1, theta2):
    """Upper bound on the squared top singular value of the transformed sample matrix."""
    if not (0 <= theta1 <= 1 and 0 <= theta2 <= 1):
        raise ContractViolation("theta values must lie in [0, 1]")
    Z = data.require_noise()
    mu2 = float(data.mu @ data.mu)
    nm = math.sqrt(mu2)
    rmax = float(np.max(np.linalg.norm(Z, axis=1)))
    return ((1 + theta2) * (mu2 + rmax**2)
            + (data.n - 1) * (mu2 + 2 * theta2 * nm * rmax + theta1 * rmax**2))
