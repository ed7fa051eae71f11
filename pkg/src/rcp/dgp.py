"""Synthetic potential-outcome data with known cross-world dependence, plus oracles.

Outcomes follow ``Y(0) = f0(x) + e0`` and ``Y(1) = f0(x) + tau(x) + e1`` with
``Var(e0) = 1``, ``Var(e1) = 4`` and the noise pair coupled by a copula with
parameter rho. Treatment is Bernoulli with propensity ``(1 + |x_1|) / 4``.
"""

from __future__ import annotations

import dataclasses
import functools
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import stats
from scipy.special import log_ndtr, ndtr, ndtri

from rcp.core import GaussianOracle, oracle_mu
from rcp.data import Dataset

MARGINALS = ("gaussian", "student_t_3", "laplace", "chisq_3")
COPULAS = ("gaussian", "gumbel")
NOISE_SD = (1.0, 2.0)

# stream tags, so that every random quantity has its own generator
_COVARIATES, _TREATMENT, _NOISE, _CATE, _BETA = 0xC0, 0x7E, 0x40, 0xCA, 0xBE


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), tag]))


def derive_seed(*entropy) -> int:
    """63-bit integer drawn from a SeedSequence over ``entropy``."""
    ss = np.random.SeedSequence([int(e) & (2**64 - 1) for e in entropy])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


# --- marginals ------------------------------------------------------------------


class Marginal:
    """Noise law standardized to mean 0 and variance 1."""

    def __init__(self, name: str):
        if name not in MARGINALS:
            raise ValueError(f"unknown marginal {name!r}; choose from {', '.join(MARGINALS)}")
        self.name = name
        if name == "gaussian":
            self._dist, self._loc, self._scale = stats.norm(), 0.0, 1.0
        elif name == "student_t_3":
            self._dist, self._loc, self._scale = stats.t(3), 0.0, math.sqrt(3.0)
        elif name == "laplace":
            self._dist, self._loc, self._scale = stats.laplace(scale=1 / math.sqrt(2.0)), 0.0, 1.0
        else:
            self._dist, self._loc, self._scale = stats.chi2(3), 3.0, math.sqrt(6.0)

    def ppf(self, u):
        return (self._dist.ppf(u) - self._loc) / self._scale

    def cdf(self, e):
        return self._dist.cdf(np.asarray(e) * self._scale + self._loc)

    def sf(self, e):
        return self._dist.sf(np.asarray(e) * self._scale + self._loc)

    def latent(self, e):
        """Standard-normal score ``Phi^-1(F(e))``, accurate in both tails."""
        c, s = self.cdf(e), self.sf(e)
        return np.where(c < 0.5, ndtri(c), -ndtri(s))


def gumbel_theta(rho: float) -> float:
    """Gumbel parameter whose Kendall tau matches a Gaussian copula with correlation ``rho``."""
    if rho < 0:
        raise ValueError("the Gumbel copula needs rho >= 0")
    tau = 2.0 / math.pi * math.asin(rho)
    return math.inf if tau >= 1.0 else 1.0 / (1.0 - tau)


def _positive_stable(alpha: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Kanter's representation of S with E[exp(-sS)] = exp(-s^alpha), 0 < alpha < 1."""
    w = rng.uniform(0.0, math.pi, size)
    e = rng.standard_exponential(size)
    return (np.sin(alpha * w) / np.sin(w) ** (1.0 / alpha)) * (np.sin((1.0 - alpha) * w) / e) ** ((1.0 - alpha) / alpha)


def gumbel_uniforms(n: int, theta: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Marshall-Olkin sampling via a positive-stable frailty."""
    if theta == 1.0:
        return rng.uniform(size=n), rng.uniform(size=n)
    if math.isinf(theta):
        u = rng.uniform(size=n)
        return u, u.copy()
    s = _positive_stable(1.0 / theta, n, rng)
    e = rng.standard_exponential((2, n))
    u = np.exp(-((e / s) ** (1.0 / theta)))
    return u[0], u[1]


def _clip_unit(u):
    return np.clip(u, 1e-16, 1.0 - 1e-16)


def sample_noise(n: int, rho: float, marginal: str = "gaussian", copula: str = "gaussian", seed: int = 0):
    """Noise pairs ``(e0, e1)`` with variances (1, 4) coupled by ``copula`` at ``rho``."""
    if not -1.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [-1, 1], got {rho}")
    if copula not in COPULAS:
        raise ValueError(f"unknown copula {copula!r}; choose from {', '.join(COPULAS)}")
    if copula == "gumbel" and rho < 0:
        raise ValueError("the Gumbel copula needs rho >= 0")
    m = Marginal(marginal)
    rng = _rng(seed, _NOISE)
    s0, s1 = NOISE_SD
    if copula == "gaussian":
        z = rng.standard_normal((2, n))
        z1 = rho * z[0] + math.sqrt(max(1.0 - rho * rho, 0.0)) * z[1]
        if marginal == "gaussian":
            return s0 * z[0], s1 * z1
        # ppf(Phi(z)) through the latent score, accurate in both tails
        return s0 * _from_latent(m, z[0]), s1 * _from_latent(m, z1)
    u0, u1 = gumbel_uniforms(n, gumbel_theta(rho), rng)
    return s0 * m.ppf(_clip_unit(u0)), s1 * m.ppf(_clip_unit(u1))


def _from_latent(m: Marginal, z):
    z = np.asarray(z, dtype=float)
    return np.where(z < 0, m._dist.ppf(ndtr(z)), m._dist.isf(ndtr(-z))) / m._scale - m._loc / m._scale


# --- covariates, propensity, effect ---------------------------------------------------


def gen_covariates(n: int, d: int, seed: int = 0) -> np.ndarray:
    """d = 1: Uniform(-1, 1). d > 1: Phi of equicorrelated (0.25) standard normals."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    rng = _rng(seed, _COVARIATES)
    if d == 1:
        return rng.uniform(-1.0, 1.0, (n, 1))
    cov = np.full((d, d), 0.25)
    np.fill_diagonal(cov, 1.0)
    latent = rng.standard_normal((n, d)) @ np.linalg.cholesky(cov).T
    return ndtr(latent)


def propensity(x) -> np.ndarray:
    """Treatment probability ``(1 + |x_1|) / 4``, within [0.25, 0.5] for |x_1| <= 1."""
    x = np.asarray(x, dtype=float)
    x1 = x[..., 0] if x.ndim >= 1 else x
    return (1.0 + np.abs(x1)) / 4.0


@dataclass(frozen=True)
class CatePolynomial:
    """``tau(x) = sum_k coef_k * x_1^a_k * x_2^b_k``."""

    exponents: tuple
    coefs: tuple

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        x1 = x[:, 0]
        x2 = x[:, 1] if x.shape[1] > 1 else np.zeros_like(x1)
        out = np.zeros(x.shape[0])
        for (a, b), c in zip(self.exponents, self.coefs):
            out += c * x1**a * x2**b
        return out

    def lipschitz_bound(self, radius: float = 1.0) -> float:
        """Upper bound on the gradient norm over ``[-radius, radius]^2``."""
        bound = 0.0
        for (a, b), c in zip(self.exponents, self.coefs):
            g1 = a * radius ** max(a - 1, 0) * radius**b if a else 0.0
            g2 = b * radius ** max(b - 1, 0) * radius**a if b else 0.0
            bound += abs(c) * math.hypot(g1, g2)
        return bound


def random_cate(seed: int, d: int, max_degree: int = 3) -> CatePolynomial:
    """Seeded polynomial in (x_1, x_2), or x_1 alone when d = 1.

    Coefficients are N(0, 1) divided by ``1 + degree``.
    """
    if d < 1:
        raise ValueError("d must be positive")
    rng = _rng(seed, _CATE)
    if d == 1:
        exps = [(a, 0) for a in range(max_degree + 1)]
    else:
        exps = [(a, b) for a, b in itertools.product(range(max_degree + 1), repeat=2) if a + b <= max_degree]
    coefs = rng.standard_normal(len(exps)) / (1.0 + np.array([a + b for a, b in exps]))
    return CatePolynomial(tuple(exps), tuple(float(c) for c in coefs))


# --- specs and samples ------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    d: int
    rho_true: float
    marginal: str = "gaussian"
    copula: str = "gaussian"
    cate_seed: int = 0
    noise_seed: int = 1
    covariate_seed: int = 2
    beta: Optional[tuple] = None  # None -> standard normal draw keyed on cate_seed

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")
        if not -1.0 <= self.rho_true <= 1.0:
            raise ValueError("rho_true must lie in [-1, 1]")
        if self.marginal not in MARGINALS:
            raise ValueError(f"unknown marginal {self.marginal!r}")
        if self.copula not in COPULAS:
            raise ValueError(f"unknown copula {self.copula!r}")
        if self.copula == "gumbel" and self.rho_true < 0:
            raise ValueError("the Gumbel copula needs rho_true >= 0")
        if self.beta is not None:
            if len(self.beta) != self.d:
                raise ValueError("beta must have length d")
            object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    @classmethod
    def from_seed(cls, n: int, d: int, rho_true: float, seed: int, **kw) -> "SyntheticSpec":
        """Spec with the three generator seeds derived from one master seed."""
        return cls(
            n, d, rho_true,
            cate_seed=derive_seed(seed, _CATE),
            noise_seed=derive_seed(seed, _NOISE),
            covariate_seed=derive_seed(seed, _COVARIATES),
            **kw,
        )

    def resolved_beta(self) -> np.ndarray:
        if self.beta is not None:
            return np.array(self.beta)
        return _rng(self.cate_seed, _BETA).standard_normal(self.d)

    def heldout(self, n: int, seed: int) -> "SyntheticSpec":
        """Same effect and baseline functions, fresh covariates and noise."""
        return dataclasses.replace(
            self,
            n=n,
            beta=tuple(self.resolved_beta()),
            noise_seed=derive_seed(self.noise_seed, seed, 1),
            covariate_seed=derive_seed(self.covariate_seed, seed, 2),
        )

    def metadata(self) -> dict:
        meta = {
            "n": self.n,
            "d": self.d,
            "rho_true": repr(self.rho_true),
            "marginal": self.marginal,
            "copula": self.copula,
            "cate_seed": self.cate_seed,
            "noise_seed": self.noise_seed,
            "covariate_seed": self.covariate_seed,
            "beta": ",".join(repr(float(b)) for b in self.resolved_beta()),
            "noise_sd": "1,2",
        }
        if self.copula == "gumbel":
            theta = gumbel_theta(self.rho_true)
            meta["gumbel_theta"] = "inf" if math.isinf(theta) else repr(theta)
            meta["gumbel_mapping"] = "kendall_tau=2/pi*asin(rho); theta=1/(1-tau)"
            if math.isinf(theta):
                meta["gumbel_limit"] = "comonotone"
        return meta


@dataclass(frozen=True, eq=False)
class SyntheticSample:
    dataset: Dataset
    y0: np.ndarray
    y1: np.ndarray
    spec: SyntheticSpec
    f0: Callable
    tau: Callable
    oracle: Callable  # (x, y, t) -> E[Y_cf | X=x, Y_obs=y, T=t]
    gaussian_oracle: Optional[GaussianOracle] = None


def baseline_functions(spec: SyntheticSpec):
    beta = spec.resolved_beta()
    tau = random_cate(spec.cate_seed, spec.d)

    def f0(x):
        return np.atleast_2d(np.asarray(x, dtype=float)) @ beta

    return f0, tau


def gen_synthetic(spec: SyntheticSpec) -> SyntheticSample:
    """Draw covariates, treatments and both potential outcomes; keep the factual one."""
    f0, tau = baseline_functions(spec)
    x = gen_covariates(spec.n, spec.d, spec.covariate_seed)
    t = (_rng(spec.covariate_seed, _TREATMENT).uniform(size=spec.n) < propensity(x)).astype(np.int8)
    e0, e1 = sample_noise(spec.n, spec.rho_true, spec.marginal, spec.copula, spec.noise_seed)
    base = f0(x)
    y0 = base + e0
    y1 = base + tau(x) + e1
    ds = Dataset(x, t, np.where(t == 1, y1, y0), np.where(t == 1, y0, y1))
    oracle, g = _build_oracle(spec, f0, tau)
    return SyntheticSample(ds, y0, y1, spec, f0, tau, oracle, g)


# --- oracles ------------------------------------------------------------------------


def _build_oracle(spec: SyntheticSpec, f0, tau):
    s0, s1 = NOISE_SD
    if spec.marginal == "gaussian" and spec.copula == "gaussian":
        g = GaussianOracle(f0, lambda x: f0(x) + tau(x), s0, s1, spec.rho_true)
        return (lambda x, y, t: oracle_mu(g, x, y, t)), g
    cond = _conditional_mean(spec.rho_true, spec.marginal, spec.copula)

    def oracle(x, y, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m0 = f0(x)
        m1 = m0 + tau(x)
        t = np.asarray(t)
        resid = np.where(t == 0, y - m0, y - m1)
        return np.where(t == 0, m1, m0) + cond(resid, t)

    return oracle, None


@functools.lru_cache(maxsize=64)
def _conditional_mean(rho: float, marginal: str, copula: str) -> "NoiseConditionalMean":
    return NoiseConditionalMean(rho, marginal, copula)


def gen_oracle(spec: SyntheticSpec) -> Callable:
    """``(x, y, t) -> E[Y_cf | X=x, Y_obs=y, T=t]`` under the true joint law of the synthetic design."""
    f0, tau = baseline_functions(spec)
    return _build_oracle(spec, f0, tau)[0]


class NoiseConditionalMean:
    """``E[e_{1-t} | e_t = r]`` for copula-coupled noise.

    Tabulated on a grid of the latent normal score of the conditioning value
    and linearly interpolated. Each node is a Stieltjes sum of the other
    noise's quantile function against the copula's conditional distribution
    ``h(v | u) = dC(u, v) / du``. Both supported copulas are exchangeable, so
    one ``h`` serves both conditioning directions. Target accuracy 1e-3.
    """

    def __init__(self, rho: float, marginal: str, copula: str, grid_size: int = 641, quad_size: int = 8001):
        self.rho = rho
        self.m = Marginal(marginal)
        self.copula = copula
        self.grid = np.linspace(-8.0, 8.0, grid_size)
        # quadrature nodes for the other uniform, in latent normal scale
        s = np.linspace(-9.0, 9.0, quad_size)
        self._v_latent = s
        mid = 0.5 * (s[1:] + s[:-1])
        self._g_nodes = np.concatenate([[s[0]], mid, [s[-1]]])
        self._g = _from_latent(self.m, self._g_nodes)  # standardized quantiles
        self._table = self._tabulate()

    def _h(self, zu: float) -> np.ndarray:
        """Conditional CDF of the other uniform, evaluated at the quadrature nodes."""
        zv = self._v_latent
        if self.copula == "gaussian":
            return ndtr((zv - self.rho * zu) / math.sqrt(1.0 - self.rho**2))
        theta = gumbel_theta(self.rho)
        if theta == 1.0:
            return ndtr(zv)
        log_u = float(log_ndtr(zu))
        log_v = log_ndtr(zv)
        a, b = -log_u, -log_v
        log_s = np.logaddexp(theta * np.log(a), theta * np.log(b))
        log_h = -np.exp(log_s / theta) + (1.0 / theta - 1.0) * log_s + (theta - 1.0) * np.log(a) - log_u
        return np.exp(log_h)

    def _deterministic(self) -> Optional[Callable]:
        if self.copula == "gaussian" and abs(self.rho) == 1.0:
            sign = 1.0 if self.rho > 0 else -1.0
            return lambda z: _from_latent(self.m, sign * z)
        if self.copula == "gumbel" and math.isinf(gumbel_theta(self.rho)):
            return lambda z: _from_latent(self.m, z)
        return None

    def _tabulate(self) -> Optional[np.ndarray]:
        if self._deterministic() is not None:
            return None
        out = np.empty(self.grid.size)
        for i, zu in enumerate(self.grid):
            h = self._h(zu)
            mass = np.diff(np.concatenate([[0.0], h, [1.0]]))
            out[i] = np.dot(mass, self._g)
        return out

    def standardized(self, z) -> np.ndarray:
        """Conditional mean of the other standardized noise given latent score ``z``."""
        det = self._deterministic()
        if det is not None:
            return det(np.asarray(z, dtype=float))
        return np.interp(z, self.grid, self._table)

    def __call__(self, resid, t) -> np.ndarray:
        s0, s1 = NOISE_SD
        t = np.asarray(t)
        own = np.where(t == 0, s0, s1)
        other = np.where(t == 0, s1, s0)
        z = self.m.latent(np.asarray(resid, dtype=float) / own)
        return other * self.standardized(z)


def twin_dgp_pair(seed: int = 0, n: int = 5000, d: int = 1) -> tuple[SyntheticSpec, SyntheticSpec]:
    """Two Gaussian specs sharing every marginal law, differing only in rho (0.2 vs 0.8)."""
    base = SyntheticSpec.from_seed(n, d, 0.2, seed)
    return base, dataclasses.replace(base, rho_true=0.8)
