"""Two-class mixture data: x = y*mu + Sigma^{1/2} xi with y uniform on {-1, +1}."""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import ConfigurationError, ContractViolation
from .rng import stream

__all__ = [
    "SigmaSpec",
    "NoiseLaw",
    "MixtureSpec",
    "Dataset",
    "generate",
    "data_functionals",
]


@dataclass(frozen=True, eq=False)
class SigmaSpec:
    """Covariance description.

    ``kind`` is one of ``identity``, ``diagonal`` (with ``values``) or
    ``spiked`` (``base * I + magnitude * u u^T`` with unit ``direction`` u).
    """

    kind: str = "identity"
    values: np.ndarray | None = None
    base: float = 1.0
    direction: np.ndarray | None = None
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind == "identity":
            return
        if self.kind == "diagonal":
            if self.values is None:
                raise ConfigurationError("diagonal covariance needs values")
            v = np.array(self.values, dtype=float).ravel()
            if v.size == 0 or not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise ConfigurationError("diagonal covariance entries must be finite and > 0")
            v.setflags(write=False)
            object.__setattr__(self, "values", v)
        elif self.kind == "spiked":
            if not (self.base > 0):
                raise ConfigurationError("spiked covariance base must be > 0")
            if not (self.base + self.magnitude > 0):
                raise ConfigurationError("spiked covariance base + magnitude must be > 0")
            if self.direction is None:
                raise ConfigurationError("spiked covariance needs a direction")
            u = np.array(self.direction, dtype=float).ravel()
            nu = np.linalg.norm(u)
            if not np.isfinite(nu) or nu == 0:
                raise ConfigurationError("spike direction must be a finite nonzero vector")
            u = u / nu
            u.setflags(write=False)
            object.__setattr__(self, "direction", u)
            object.__setattr__(self, "base", float(self.base))
            object.__setattr__(self, "magnitude", float(self.magnitude))
        else:
            raise ConfigurationError(f"unknown covariance kind {self.kind!r}")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def diagonal(cls, values):
        return cls("diagonal", values=values)

    @classmethod
    def spiked(cls, base, direction, magnitude):
        return cls("spiked", base=base, direction=direction, magnitude=magnitude)

    def check_dim(self, p):
        if self.kind == "diagonal" and self.values.size != p:
            raise ConfigurationError(f"diagonal covariance has {self.values.size} entries, expected {p}")
        if self.kind == "spiked" and self.direction.size != p:
            raise ConfigurationError(f"spike direction has length {self.direction.size}, expected {p}")

    # --- linear algebra on Sigma -------------------------------------------
    def half_apply(self, xi):
        """Rows of ``xi`` mapped to ``Sigma^{1/2} xi_i``."""
        xi = np.asarray(xi, dtype=float)
        if self.kind == "identity":
            return xi
        if self.kind == "diagonal":
            return xi * np.sqrt(self.values)
        sb = math.sqrt(self.base)
        coef = math.sqrt(self.base + self.magnitude) - sb
        return sb * xi + coef * np.multiply.outer(xi @ self.direction, self.direction)

    def quad(self, w):
        """w^T Sigma w."""
        w = np.asarray(w, dtype=float)
        if self.kind == "identity":
            return float(w @ w)
        if self.kind == "diagonal":
            return float(np.sum(self.values * w * w))
        return float(self.base * (w @ w) + self.magnitude * (w @ self.direction) ** 2)

    def inv_quad(self, v):
        """v^T Sigma^{-1} v."""
        v = np.asarray(v, dtype=float)
        if self.kind == "identity":
            return float(v @ v)
        if self.kind == "diagonal":
            return float(np.sum(v * v / self.values))
        b, c = self.base, self.magnitude
        return float((v @ v) / b + (1.0 / (b + c) - 1.0 / b) * (v @ self.direction) ** 2)

    def eig_range(self, p):
        """(beta_min, beta_max) of Sigma in dimension p."""
        if self.kind == "identity":
            return 1.0, 1.0
        if self.kind == "diagonal":
            return float(self.values.min()), float(self.values.max())
        lo = [self.base + self.magnitude]
        if p > 1:
            lo.append(self.base)
        return float(min(lo)), float(max(lo))

    def trace(self, p):
        if self.kind == "identity":
            return float(p)
        if self.kind == "diagonal":
            return float(self.values.sum())
        return float(p * self.base + self.magnitude)

    def fro(self, p):
        if self.kind == "identity":
            return math.sqrt(p)
        if self.kind == "diagonal":
            return float(np.linalg.norm(self.values))
        return math.sqrt((p - 1) * self.base**2 + (self.base + self.magnitude) ** 2)

    def dense(self, p):
        if self.kind == "identity":
            return np.eye(p)
        if self.kind == "diagonal":
            return np.diag(self.values)
        return self.base * np.eye(p) + self.magnitude * np.outer(self.direction, self.direction)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "diagonal":
            d["values"] = self.values.tolist()
        elif self.kind == "spiked":
            d.update(base=self.base, direction=self.direction.tolist(), magnitude=self.magnitude)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", "identity")
        return cls(kind, **d)


@dataclass(frozen=True)
class NoiseLaw:
    """Standardized noise law for the entries of xi.

    ``poly_tail`` is a Student-t with ``base_df`` degrees of freedom scaled to
    unit variance; its ``r``-th absolute moment is finite iff ``base_df > r``.
    """

    kind: str = "gaussian"
    r: float | None = None
    base_df: float | None = None

    def __post_init__(self):
        if self.kind in ("gaussian", "rademacher_subgauss"):
            return
        if self.kind != "poly_tail":
            raise ConfigurationError(f"unknown noise law {self.kind!r}")
        r = 4.0 if self.r is None else float(self.r)
        df = 5.0 if self.base_df is None else float(self.base_df)
        if not (2 < r <= 4):
            raise ConfigurationError("poly_tail moment order r must lie in (2, 4]")
        if not (df > r):
            raise ConfigurationError(
                f"Student-t with df={df} has no finite moment of order r={r}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "base_df", df)

    def sample(self, rng, shape):
        if self.kind == "gaussian":
            return rng.standard_normal(shape)
        if self.kind == "rademacher_subgauss":
            return 2.0 * rng.integers(0, 2, size=shape).astype(float) - 1.0
        df = self.base_df
        return rng.standard_t(df, size=shape) * math.sqrt((df - 2.0) / df)

    @property
    def psi2(self):
        """Sub-Gaussian norm used in reported exponents (None if not sub-Gaussian)."""
        return None if self.kind == "poly_tail" else 1.0

    @property
    def subgauss_L(self):
        return 1.0 if self.kind == "rademacher_subgauss" else None

    @property
    def moment_K(self):
        """Achieved r-th absolute moment of the standardized poly_tail law."""
        if self.kind != "poly_tail":
            return None
        r, df = self.r, self.base_df
        log_m = (0.5 * r * math.log(df) + gammaln((r + 1) / 2) + gammaln((df - r) / 2)
                 - 0.5 * math.log(math.pi) - gammaln(df / 2))
        return float(math.exp(log_m) * ((df - 2.0) / df) ** (r / 2))

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "poly_tail":
            d.update(r=self.r, base_df=self.base_df)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(d.pop("kind", "gaussian"), **d)


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    p: int
    n: int
    mu: np.ndarray
    sigma_spec: SigmaSpec = field(default_factory=SigmaSpec)
    noise_law: NoiseLaw = field(default_factory=NoiseLaw)
    seed: int = 0

    def __post_init__(self):
        if int(self.n) < 1 or int(self.p) < 1:
            raise ConfigurationError("need n >= 1 and p >= 1")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "p", int(self.p))
        mu = np.array(self.mu, dtype=float).ravel()
        if mu.size != self.p:
            raise ConfigurationError(f"mu has length {mu.size}, expected p={self.p}")
        if not np.all(np.isfinite(mu)):
            raise ConfigurationError("mu must be finite")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        if isinstance(self.sigma_spec, dict):
            object.__setattr__(self, "sigma_spec", SigmaSpec.from_dict(self.sigma_spec))
        if isinstance(self.noise_law, dict):
            object.__setattr__(self, "noise_law", NoiseLaw.from_dict(self.noise_law))
        self.sigma_spec.check_dim(self.p)
        seed = int(self.seed)
        if not 0 <= seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "seed", seed)

    @property
    def norm_mu(self):
        return float(np.linalg.norm(self.mu))

    def replace(self, **kw):
        d = dict(p=self.p, n=self.n, mu=self.mu, sigma_spec=self.sigma_spec,
                 noise_law=self.noise_law, seed=self.seed)
        d.update(kw)
        return MixtureSpec(**d)

    def to_dict(self):
        return {
            "p": self.p,
            "n": self.n,
            "mu": self.mu.tolist(),
            "sigma_spec": self.sigma_spec.to_dict(),
            "noise_law": self.noise_law.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(p=d["p"], n=d["n"], mu=d["mu"],
                   sigma_spec=SigmaSpec.from_dict(d.get("sigma_spec", {"kind": "identity"})),
                   noise_law=NoiseLaw.from_dict(d.get("noise_law", {"kind": "gaussian"})),
                   seed=d.get("seed", 0))

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Samples from the mixture.

    ``Z`` is stored as ``X - y mu^T`` so that identity holds bit for bit.  For
    data observed without a known mean (``spec is None``) ``Z`` is None.
    """

    X: np.ndarray
    y: np.ndarray
    Z: np.ndarray | None
    spec: MixtureSpec | None

    def __post_init__(self):
        for name in ("X", "y", "Z"):
            a = getattr(self, name)
            if a is not None:
                a.setflags(write=False)

    @classmethod
    def from_components(cls, y, Z, spec):
        y = np.asarray(y, dtype=float).ravel()
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if not np.all(np.abs(y) == 1):
            raise ContractViolation("labels must be in {-1, +1}")
        if Z.shape != (y.size, spec.p):
            raise ContractViolation(f"Z has shape {Z.shape}, expected {(y.size, spec.p)}")
        shift = np.multiply.outer(y, spec.mu)
        X = Z + shift
        return cls(X=X, y=y, Z=X - shift, spec=spec)

    @classmethod
    def from_arrays(cls, X, y, mu=None):
        X = np.atleast_2d(np.array(X, dtype=float))
        y = np.array(y, dtype=float).ravel()
        if X.shape[0] != y.size:
            raise ContractViolation("X and y disagree on the number of samples")
        if not np.all(np.abs(y) == 1):
            raise ContractViolation("labels must be in {-1, +1}")
        if mu is None:
            return cls(X=X, y=y, Z=None, spec=None)
        spec = MixtureSpec(p=X.shape[1], n=X.shape[0], mu=mu)
        return cls(X=X, y=y, Z=X - np.multiply.outer(y, spec.mu), spec=spec)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def n_plus(self):
        return int(np.sum(self.y > 0))

    @property
    def n_minus(self):
        return self.n - self.n_plus

    @property
    def mu(self):
        if self.spec is None:
            raise ContractViolation("dataset has no known mean vector")
        return self.spec.mu

    def require_noise(self):
        if self.Z is None:
            raise ContractViolation("noise vectors unavailable: dataset built without a known mean")
        return self.Z

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y"] + [f"x_{j + 1}" for j in range(self.p)])
            for yi, row in zip(self.y, self.X):
                w.writerow([f"{int(yi)}"] + [format(v, ".17g") for v in row])

    @classmethod
    def read_csv(cls, path, mu=None):
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if not header or header[0] != "y":
                raise ContractViolation("dataset CSV must start with a 'y' column")
            rows = [[float(v) for v in row] for row in r if row]
        arr = np.array(rows, dtype=float).reshape(len(rows), len(header))
        return cls.from_arrays(arr[:, 1:], arr[:, 0], mu=mu)


def generate(spec):
    """Draw a Dataset; labels and noise use separate streams of ``spec.seed``."""
    y = 2.0 * stream(spec.seed, "labels").integers(0, 2, size=spec.n).astype(float) - 1.0
    xi = spec.noise_law.sample(stream(spec.seed, "noise"), (spec.n, spec.p))
    z = spec.sigma_spec.half_apply(xi)
    shift = np.multiply.outer(y, spec.mu)
    X = z + shift
    return Dataset(X=X, y=y, Z=X - shift, spec=spec)


def data_functionals(spec):
    s = spec.sigma_spec
    return {
        "norm_mu_sq": float(spec.mu @ spec.mu),
        "trace_sigma": s.trace(spec.p),
        "fro_sigma": s.fro(spec.p),
        "op_sigma": s.eig_range(spec.p)[1],
        "sigma_half_mu_norm": math.sqrt(s.quad(spec.mu)),
    }
