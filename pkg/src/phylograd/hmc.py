"""Hamiltonian Monte Carlo over branch lengths or branch rate scalars.

Parameters are sampled on the log scale; the log-Jacobian is part of the
target, so the sampler state is unconstrained.  Step size is tuned during
warmup by dual averaging towards a target acceptance rate and then frozen.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .backend import Backend
from .core import LikelihoodEngine
from .errors import ImpossiblePatternError, ValidationError

PARAMETERIZATIONS = ("branch_lengths", "rate_scalars")
DIVERGENCE_LIMIT = 1000.0
LOG_BOUND = 50.0  # |log parameter| beyond this is treated as zero density


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 0.05
    leapfrog_steps: int = 10
    iterations: int = 1000
    warmup: int = 500
    seed: int = 1
    mass_diagonal: tuple = None
    parameterization: str = "branch_lengths"
    target_accept: float = 0.8
    adapt_step_size: bool = True

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValidationError("step size must be > 0")
        if self.leapfrog_steps < 1 or self.iterations < 1 or self.warmup < 0:
            raise ValidationError("leapfrog steps and iterations must be positive")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValidationError(f"parameterization must be one of {PARAMETERIZATIONS}")
        if not 0 < self.target_accept < 1:
            raise ValidationError("target acceptance must lie in (0, 1)")
        if self.mass_diagonal is not None and np.any(np.asarray(self.mass_diagonal) <= 0):
            raise ValidationError("mass matrix entries must be > 0")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")


class LogPosterior:
    """Log posterior and gradient in log-parameter space.

    Default priors: exponential(1) on branch lengths, lognormal(0, 1) on
    rate scalars.  ``value_and_gradient(theta)`` returns ``-inf`` and a zero
    gradient where the likelihood is zero.
    """

    def __init__(self, tree, model, alignment, backend: Backend | None = None,
                 parameterization: str = "branch_lengths", rescale: bool = True):
        if parameterization not in PARAMETERIZATIONS:
            raise ValidationError(f"parameterization must be one of {PARAMETERIZATIONS}")
        self.parameterization = parameterization
        self.engine = LikelihoodEngine(tree, model, alignment, backend, rescale=rescale)
        self.base = tree
        self.gradient_calls = 0

    @property
    def dimension(self) -> int:
        return self.base.branch_count

    def initial(self) -> np.ndarray:
        if self.parameterization == "branch_lengths":
            values = np.maximum(self.base.branch_lengths, 1e-6)
        else:
            values = self.base.rate_scalars
        return np.log(values)

    def tree_at(self, theta):
        x = np.exp(theta)
        if self.parameterization == "branch_lengths":
            return self.base.with_branch_lengths(x)
        return self.base.with_rate_scalars(x)

    def log_prior(self, theta) -> tuple[float, np.ndarray]:
        """Prior plus log-Jacobian, and its gradient, in theta space."""
        if self.parameterization == "branch_lengths":
            x = np.exp(theta)
            return float(np.sum(theta - x)), 1.0 - x
        return float(-0.5 * np.dot(theta, theta)), -theta

    def value_and_gradient(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)) or np.any(np.abs(theta) > LOG_BOUND):
            return -np.inf, np.zeros_like(theta)
        self.engine.set_tree(self.tree_at(theta))
        self.gradient_calls += 1
        try:
            report = self.engine.gradient()
        except ImpossiblePatternError:
            return -np.inf, np.zeros_like(theta)
        if self.parameterization == "branch_lengths":
            dloglik = report.wrt_lengths * report.branch_lengths
        else:
            dloglik = report.wrt_rate_scalars * report.rate_scalars
        lp, dlp = self.log_prior(theta)
        return report.log_likelihood + lp, dloglik + dlp


def leapfrog(theta, momentum, step_size, steps, grad_fn, inv_mass, grad=None):
    """``steps`` leapfrog steps; returns ``(theta, momentum, logp, grad)``.

    ``grad_fn(theta) -> (logp, grad)``.  ``grad`` may carry the gradient at
    the starting point to save one evaluation.
    """
    theta = np.array(theta, dtype=float)
    p = np.array(momentum, dtype=float)
    if grad is None:
        _, grad = grad_fn(theta)
    logp = None
    p = p + 0.5 * step_size * grad
    for k in range(steps):
        theta = theta + step_size * inv_mass * p
        logp, grad = grad_fn(theta)
        if not np.isfinite(logp):
            return theta, p, logp, grad
        if k < steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    return theta, p, logp, grad


def hamiltonian(logp, momentum, inv_mass) -> float:
    return -logp + 0.5 * float(np.sum(inv_mass * momentum * momentum))


class _DualAveraging:
    def __init__(self, step, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10 * step)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.hbar = 0.0
        self.log_avg = 0.0
        self.t = 0

    def update(self, accept_prob):
        self.t += 1
        t = self.t
        self.hbar += ((self.target - accept_prob) - self.hbar) / (t + self.t0)
        log_step = self.mu - np.sqrt(t) / self.gamma * self.hbar
        eta = t ** -self.kappa
        self.log_avg = eta * log_step + (1 - eta) * self.log_avg
        return float(np.exp(log_step))

    @property
    def final(self):
        return float(np.exp(self.log_avg))


def effective_sample_size(x) -> float:
    """ESS from FFT autocorrelations truncated by Geyer's initial monotone sequence."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return float(n)
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    rho = acov / acov[0]
    pairs = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
    total = 0.0
    prev = np.inf
    for k, g in enumerate(pairs):
        if g <= 0:
            break
        g = min(g, prev)
        prev = g
        total += g
    tau = -1.0 + 2.0 * total
    return float(n / max(tau, 1e-12))


@dataclass
class HmcResult:
    chain: np.ndarray  # (iterations, dim) constrained parameter values
    log_posterior: np.ndarray
    step_size: float
    acceptance_rate: float
    divergences: int
    warmup_divergences: int
    iteration_ns: np.ndarray
    gradient_calls: int
    parameterization: str
    names: list = field(default_factory=list)

    @property
    def means(self):
        return self.chain.mean(axis=0)

    @property
    def sds(self):
        return self.chain.std(axis=0, ddof=1) if len(self.chain) > 1 else np.zeros(self.chain.shape[1])

    def ess(self):
        return np.array([effective_sample_size(self.chain[:, k]) for k in range(self.chain.shape[1])])

    def diagnostics(self) -> dict:
        return {
            "parameterization": self.parameterization,
            "iterations": int(len(self.chain)),
            "stepSize": self.step_size,
            "acceptanceRate": self.acceptance_rate,
            "divergences": self.divergences,
            "warmupDivergences": self.warmup_divergences,
            "gradientCalls": self.gradient_calls,
            "meanIterationNs": float(self.iteration_ns.mean()) if self.iteration_ns.size else 0.0,
            "totalNs": int(self.iteration_ns.sum()),
            "parameters": [
                {"name": n, "mean": float(m), "sd": float(s), "ess": float(e)}
                for n, m, s, e in zip(self.names, self.means, self.sds, self.ess())
            ],
        }

    def chain_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("iteration\tlogPosterior\t" + "\t".join(self.names) + "\n")
        for k, (lp, row) in enumerate(zip(self.log_posterior, self.chain)):
            buf.write(f"{k + 1}\t{float(lp)!r}\t" + "\t".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    def diagnostics_json(self) -> str:
        return json.dumps(self.diagnostics(), indent=2)


def hmc_sample(tree, model, alignment, config: HmcConfig = HmcConfig(),
               backend: Backend | None = None, target: LogPosterior | None = None) -> HmcResult:
    """Run warmup then ``config.iterations`` Metropolis-corrected leapfrog transitions."""
    target = target or LogPosterior(tree, model, alignment, backend, config.parameterization)
    dim = target.dimension
    if config.mass_diagonal is None:
        mass = np.ones(dim)
    else:
        mass = np.broadcast_to(np.asarray(config.mass_diagonal, dtype=float), (dim,)).copy()
    inv_mass = 1.0 / mass
    rng = np.random.Generator(np.random.PCG64(config.seed))
    theta = target.initial()
    logp, grad = target.value_and_gradient(theta)
    if not np.isfinite(logp):
        raise ImpossiblePatternError([])
    step = config.step_size
    adapt = _DualAveraging(step, config.target_accept) if config.adapt_step_size else None
    total = config.warmup + config.iterations
    chain = np.empty((config.iterations, dim))
    logps = np.empty(config.iterations)
    times = np.empty(config.iterations, dtype=np.int64)
    accepted = 0
    divergences = warm_div = 0
    for it in range(total):
        start = time.perf_counter_ns()
        warm = it < config.warmup
        p0 = rng.standard_normal(dim) * np.sqrt(mass)
        h0 = hamiltonian(logp, p0, inv_mass)
        new_theta, p1, new_logp, new_grad = leapfrog(theta, p0, step, config.leapfrog_steps,
                                                     target.value_and_gradient, inv_mass, grad)
        h1 = hamiltonian(new_logp, p1, inv_mass) if np.isfinite(new_logp) else np.inf
        delta = h1 - h0
        divergent = not np.isfinite(delta) or delta > DIVERGENCE_LIMIT
        accept_prob = 0.0 if divergent else float(min(1.0, np.exp(-delta)))
        if divergent:
            if warm:
                warm_div += 1
            else:
                divergences += 1
        if rng.random() < accept_prob:
            theta, logp, grad = new_theta, new_logp, new_grad
            if not warm:
                accepted += 1
        if warm and adapt is not None:
            step = adapt.update(accept_prob)
            if it == config.warmup - 1:
                step = adapt.final
        if not warm:
            k = it - config.warmup
            chain[k] = np.exp(theta)
            logps[k] = logp
            times[k] = time.perf_counter_ns() - start
    prefix = "b" if config.parameterization == "branch_lengths" else "r"
    names = [f"{prefix}{i + 1}" for i in range(dim)]
    return HmcResult(chain, logps, step, accepted / config.iterations, divergences, warm_div,
                     times, target.gradient_calls, config.parameterization, names)
