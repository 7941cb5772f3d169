"""Marginal Metropolis-Hastings over parameters and the initial latent state.

The chain walks in unconstrained coordinates ``w = (log theta, x(t_start))``
with a Gaussian random-walk proposal. Every proposal is scored by integrating
the model over the training window and comparing the observed state component
with the measurements under Gaussian noise.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import Dataset, LatentSample, PriorSpec, StateSpaceModel, prior_logdensity, sample_prior
from .ode import IntegrationError, IntegratorConfig, make_plan, run_plan

logger = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class InitializationError(RuntimeError):
    pass


class ChainLengthError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Likelihood
# ----------------------------------------------------------------------------


class Likelihood:
    """Gaussian measurement log-likelihood with a cached integration plan.

    The plan (step grid and sampled inputs) depends only on the dataset, so it
    is built once and reused for every proposal.
    """

    def __init__(self, dataset: Dataset, model: StateSpaceModel,
                 cfg: IntegratorConfig = IntegratorConfig()):
        if dataset.M == 0:
            raise ValueError("dataset has no measurements")
        self.dataset = dataset
        self.model = model
        self.cfg = cfg
        self.plan = make_plan(dataset.t_start, dataset.t_end, cfg, dataset.input,
                              dataset.disturbance, model.field.n_u)
        self.rec_idx = self.plan.snap(dataset.times)
        self.m = dataset.M

    def use_prefix(self, m: int) -> None:
        """Score only the first ``m`` measurements from now on."""
        self.m = int(min(max(m, 1), self.dataset.M))

    def predict(self, z: LatentSample) -> np.ndarray:
        states = run_plan(self.model.field, self.plan, z.x0, self.model.params(z.theta),
                          self.rec_idx[: self.m])
        return states[:, self.model.observed]

    def __call__(self, z: LatentSample) -> float:
        if np.any(~(z.theta > 0)) or not np.all(np.isfinite(z.x0)):
            return -np.inf
        try:
            pred = self.predict(z)
        except IntegrationError:
            return -np.inf
        sigma = self.dataset.noise_sigma
        r = self.dataset.outputs[: self.m] - pred
        ll = -self.m * (np.log(sigma) + _LOG_SQRT_2PI) - 0.5 * float(r @ r) / sigma**2
        return ll if np.isfinite(ll) else -np.inf


def log_likelihood(z: LatentSample, dataset: Dataset, model: StateSpaceModel,
                   cfg: IntegratorConfig = IntegratorConfig()) -> float:
    """``sum_m log N(y_m - g(x(t_m)); 0, sigma^2)``; ``-inf`` on failure."""
    return Likelihood(dataset, model, cfg)(z)


# ----------------------------------------------------------------------------
# Proposal and acceptance
# ----------------------------------------------------------------------------


@dataclass
class ProposalState:
    """Random-walk covariance ``scale**2 * covariance`` in ``(log theta, x)``."""

    covariance: np.ndarray
    scale: float = 1.0
    stage: int = 0
    _factor: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if not np.allclose(self.covariance, self.covariance.T):
            raise ValueError("proposal covariance must be symmetric")
        if not self.scale > 0:
            raise ValueError("proposal scale must be positive")

    @property
    def factor(self) -> np.ndarray:
        # eigh rather than Cholesky so that degenerate covariances still work
        if self._factor is None:
            vals, vecs = np.linalg.eigh(self.covariance)
            self._factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
        return self._factor


def propose(z: LatentSample, prop: ProposalState, rng: np.random.Generator) -> LatentSample:
    w = z.to_unconstrained()
    w_new = w + prop.scale * (prop.factor @ rng.standard_normal(w.size))
    return LatentSample.from_unconstrained(w_new, z.theta.size)


def log_jacobian_correction(z_new: LatentSample, z_cur: LatentSample) -> float:
    """``log q(z|z') - log q(z'|z)`` for the log-space random walk."""
    return float(np.sum(np.log(z_new.theta)) - np.sum(np.log(z_cur.theta)))


def acceptance_log_ratio(logpost_new: float, logpost_cur: float, logq_correction: float = 0.0) -> float:
    """``log alpha = min(0, logpost_new - logpost_cur + logq_correction)``."""
    if logpost_new == -np.inf:
        return -np.inf
    return min(0.0, logpost_new - logpost_cur + logq_correction)


# ----------------------------------------------------------------------------
# Chain
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainConfig:
    """Sampler settings.

    ``stages`` lists ``(measurement_count, iterations)`` warm-up phases. Each
    one re-estimates the proposal covariance from its own states. ``counting``
    selects what advances the chain index: ``"iterations"`` (every proposal,
    rejected or not, appends the current state) or ``"accepted"`` (only
    accepted proposals are appended).
    """

    K: int = 50
    K_b: int = 500
    k_d: int = 25
    stages: tuple[tuple[int, int], ...] = ((25, 2000), (50, 2000), (100, 2000), (200, 2000))
    seed: int = 0
    counting: str = "iterations"
    max_proposals: int = 10**7
    init_retries: int = 1000
    shrinkage: float = 0.1
    min_stage_acceptance: float = 0.05
    init_log_step: float = 0.05
    init_state_fraction: float = 0.1

    def __post_init__(self):
        if self.K < 1 or self.K_b < 0 or self.k_d < 0:
            raise ValueError("need K >= 1, K_b >= 0, k_d >= 0")
        if self.counting not in ("iterations", "accepted"):
            raise ValueError(f"unknown counting mode {self.counting!r}")
        object.__setattr__(self, "stages", tuple((int(m), int(n)) for m, n in self.stages))

    @property
    def chain_length(self) -> int:
        return self.K_b + 1 + (self.K - 1) * (self.k_d + 1)

    def digest(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


@dataclass
class ChainResult:
    """Raw production chain in natural coordinates ``(theta, x(t_start))``."""

    samples: np.ndarray
    logpost: np.ndarray
    loglik: np.ndarray
    n_theta: int
    proposal: ProposalState
    stage_acceptance: list[float]
    acceptance: float
    n_proposals: int
    init: LatentSample

    def latent(self, i: int) -> LatentSample:
        return LatentSample(self.samples[i, : self.n_theta], self.samples[i, self.n_theta:])


def initial_proposal(prior: PriorSpec, cfg: ChainConfig) -> ProposalState:
    var = np.concatenate([np.full(prior.n_theta, cfg.init_log_step**2),
                          (prior.state_sigma * cfg.init_state_fraction) ** 2])
    return ProposalState(np.diag(var))


def _initial_point(lik: Likelihood, prior: PriorSpec, rng, retries: int):
    for _ in range(retries):
        z = sample_prior(prior, rng)
        ll = lik(z)
        if np.isfinite(ll):
            return z, ll
    raise InitializationError(f"no finite-likelihood prior draw in {retries} attempts")


class _Walker:
    """Current state of one chain plus the accept/reject step."""

    def __init__(self, lik: Likelihood, prior: PriorSpec, z: LatentSample, ll: float):
        self.lik, self.prior = lik, prior
        self.z, self.ll = z, ll
        self.lp = ll + prior_logdensity(z, prior)
        self.n_proposals = 0

    def rescore(self) -> None:
        self.ll = self.lik(self.z)
        self.lp = self.ll + prior_logdensity(self.z, self.prior)

    def step(self, prop: ProposalState, rng: np.random.Generator) -> bool:
        self.n_proposals += 1
        z_new = propose(self.z, prop, rng)
        lprior = prior_logdensity(z_new, self.prior)
        if lprior == -np.inf:
            return False
        ll_new = self.lik(z_new)
        lp_new = ll_new + lprior
        log_alpha = acceptance_log_ratio(lp_new, self.lp, log_jacobian_correction(z_new, self.z))
        if np.log(rng.random()) < log_alpha:
            self.z, self.ll, self.lp = z_new, ll_new, lp_new
            return True
        return False


def run_chain(dataset: Dataset, model: StateSpaceModel, prior: PriorSpec, cfg: ChainConfig,
              rng: np.random.Generator, integrator: IntegratorConfig = IntegratorConfig(),
              init: LatentSample | None = None) -> ChainResult:
    """Staged adaptation followed by a production chain of ``cfg.chain_length`` states."""
    lik = Likelihood(dataset, model, integrator)
    d = prior.dim
    prop0 = initial_proposal(prior, cfg)
    prop = ProposalState(prop0.covariance.copy())

    first_m = cfg.stages[0][0] if cfg.stages else dataset.M
    lik.use_prefix(first_m)
    if init is None:
        z, ll = _initial_point(lik, prior, rng, cfg.init_retries)
    else:
        z, ll = init, lik(init)
        if not np.isfinite(ll):
            raise InitializationError("supplied initial point has zero likelihood")
    walker = _Walker(lik, prior, z, ll)
    z_init = z

    stage_acc: list[float] = []
    for s, (m, iters) in enumerate(cfg.stages):
        lik.use_prefix(m)
        walker.rescore()
        states = np.empty((iters, d))
        n_acc = 0
        for i in range(iters):
            n_acc += walker.step(prop, rng)
            states[i] = walker.z.to_unconstrained()
        rate = n_acc / max(iters, 1)
        stage_acc.append(rate)
        scale = 2.38 / np.sqrt(d)
        if rate < cfg.min_stage_acceptance:
            scale = prop.scale / 2
        cov = np.cov(states.T).reshape(d, d) if iters > 1 else prop.covariance
        cov = (1 - cfg.shrinkage) * cov + cfg.shrinkage * prop0.covariance
        prop = ProposalState(0.5 * (cov + cov.T), scale, s + 1)
        logger.info("stage %d: m=%d acceptance=%.3f", s, m, rate)

    lik.use_prefix(dataset.M)
    walker.rescore()
    if not np.isfinite(walker.lp):
        raise InitializationError("chain state has zero posterior after warm-up")

    L = cfg.chain_length
    samples = np.empty((L, d))
    logpost = np.empty(L)
    loglik = np.empty(L)
    n_theta = prior.n_theta

    def record(k):
        samples[k, :n_theta] = walker.z.theta
        samples[k, n_theta:] = walker.z.x0
        logpost[k] = walker.lp
        loglik[k] = walker.ll

    record(0)
    k = 1
    start = walker.n_proposals
    n_acc = 0
    while k < L:
        if walker.n_proposals - start >= cfg.max_proposals:
            raise RuntimeError(f"proposal cap {cfg.max_proposals} hit with {k} of {L} samples")
        accepted = walker.step(prop, rng)
        n_acc += accepted
        if accepted or cfg.counting == "iterations":
            record(k)
            k += 1
    n_prod = walker.n_proposals - start
    return ChainResult(samples, logpost, loglik, n_theta, prop, stage_acc,
                       n_acc / max(n_prod, 1), walker.n_proposals, z_init)


def burn_in_and_thin(chain: np.ndarray, K_b: int, k_d: int, K: int | None = None) -> np.ndarray:
    """Drop ``K_b`` leading states, then keep every ``(k_d + 1)``-th one.

    With ``K`` given, exactly ``K`` rows are returned and the chain must be
    long enough to supply them.
    """
    chain = np.asarray(chain)
    kept = chain[K_b:: k_d + 1]
    if K is None:
        return kept
    need = K_b + 1 + (K - 1) * (k_d + 1)
    if len(chain) < need:
        raise ChainLengthError(f"chain of {len(chain)} is shorter than {need}")
    return kept[:K]


@dataclass(frozen=True)
class PosteriorSampleSet:
    """Posterior scenarios ``(theta, x(t_end))`` with provenance."""

    theta: np.ndarray
    x0: np.ndarray
    logpost: np.ndarray
    seed: int = 0
    config_hash: str = ""
    theta_names: tuple[str, ...] = ()
    state_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.theta)

    def __iter__(self):
        for th, x in zip(self.theta, self.x0):
            yield LatentSample(th, x)


def map_to_t0(samples: np.ndarray, n_theta: int, model: StateSpaceModel, dataset: Dataset,
              cfg: IntegratorConfig = IntegratorConfig(), logpost=None, seed: int = 0,
              config_hash: str = "") -> PosteriorSampleSet:
    """Propagate each ``x(t_start)`` to ``t_end`` under its own parameters."""
    plan = make_plan(dataset.t_start, dataset.t_end, cfg, dataset.input, dataset.disturbance,
                     model.field.n_u)
    end = np.array([len(plan.grid) - 1])
    keep, x_end = [], []
    for i, row in enumerate(np.asarray(samples)):
        theta = row[:n_theta]
        try:
            x_end.append(run_plan(model.field, plan, row[n_theta:], model.params(theta), end)[0])
            keep.append(i)
        except IntegrationError as err:
            warnings.warn(f"sample {i} dropped: {err}", RuntimeWarning, stacklevel=2)
    keep = np.array(keep, dtype=int)
    samples = np.asarray(samples)
    lp = np.zeros(len(samples)) if logpost is None else np.asarray(logpost)
    return PosteriorSampleSet(samples[keep, :n_theta], np.array(x_end).reshape(len(keep), -1),
                              lp[keep], seed, config_hash, model.theta_names, model.state_names)


def acf(series, max_lag: int) -> np.ndarray:
    """Normalised autocorrelation ``rho(0..max_lag)`` with the biased estimator."""
    s = np.asarray(series, dtype=float)
    if len(s) <= max_lag:
        raise ValueError("series must be longer than max_lag")
    s = s - s.mean()
    denom = float(s @ s)
    if denom == 0.0:
        raise ValueError("autocorrelation of a constant series is undefined")
    n = len(s)
    return np.array([float(s[: n - lag] @ s[lag:]) / denom for lag in range(max_lag + 1)])


def infer(dataset: Dataset, model: StateSpaceModel, prior: PriorSpec, cfg: ChainConfig,
          rng: np.random.Generator | None = None,
          integrator: IntegratorConfig = IntegratorConfig()) -> tuple[PosteriorSampleSet, ChainResult]:
    """Run the chain, discard burn-in, thin, and map the kept samples to ``t_end``."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    chain = run_chain(dataset, model, prior, cfg, rng, integrator)
    idx = burn_in_and_thin(np.arange(len(chain.samples)), cfg.K_b, cfg.k_d, cfg.K)
    post = map_to_t0(chain.samples[idx], prior.n_theta, model, dataset, integrator,
                     chain.logpost[idx], cfg.seed, cfg.digest())
    return post, chain
