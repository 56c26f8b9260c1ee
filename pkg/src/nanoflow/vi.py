"""Mean-field Gaussian variational inference over the two networks'
parameters (and, in inverse mode, over log10 attachment/detachment
coefficients), trained with Adam on the reparameterized ELBO."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from nanoflow.collocation import CollocationSet
from nanoflow.domain import ColumnConfig
from nanoflow.losses import LossBreakdown, NoiseScales, PhysicsLoss
from nanoflow.network import (
    DEFAULT_SPEC,
    KIND_VI_FORWARD,
    KIND_VI_INVERSE,
    MlpSpec,
    forward_pass,
    load_vector,
    save_vector,
)

LN10 = math.log(10.0)


class TrainingError(RuntimeError):
    """Raised when the ELBO or one of its terms becomes non-finite."""


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("softplus inverse requires positive input")
    return y + np.log1p(-np.exp(-y))


@dataclass(frozen=True)
class PriorSpec:
    """Zero-mean Gaussian prior over network weights; broad Gaussian over
    the log10 kinetic coefficients in inverse mode."""

    weight_std: float = 1.0
    latent_mean: float = -3.5
    latent_std: float = 1.0

    def __post_init__(self):
        if self.weight_std <= 0 or self.latent_std <= 0:
            raise ValueError("prior stds must be > 0")


@dataclass
class VariationalState:
    """Diagonal Gaussian over the concatenated parameter vector
    [net_c weights, net_s weights, (log10 k_a, log10 k_d)]; std is
    softplus(rho)."""

    mu: np.ndarray
    rho: np.ndarray
    latent: bool

    @property
    def std(self) -> np.ndarray:
        return softplus(self.rho)

    def network_dim(self) -> int:
        return self.mu.size - (2 if self.latent else 0)


@dataclass
class TrainReport:
    state: VariationalState
    elbo_trace: np.ndarray
    trace: np.ndarray  # columns per TRACE_HEADER
    wall_clock: float
    seed: int
    preset: str
    mode: str
    iters: int
    lr: float


TRACE_HEADER = (
    "iter,r_pde_c,r_pde_s,r_inlet,r_outlet,r_init_c,r_init_s,r_data,"
    "total_nll,kl,elbo"
)


def kl_gaussian_diag(q_mu, q_std, p_mu, p_std):
    """KL(N(q_mu, q_std²) ‖ N(p_mu, p_std²)), summed over coordinates."""
    q_mu, q_std = np.asarray(q_mu, dtype=float), np.asarray(q_std, dtype=float)
    p_mu, p_std = np.broadcast_to(p_mu, q_mu.shape), np.broadcast_to(p_std, q_mu.shape)
    if np.any(q_std <= 0) or np.any(p_std <= 0):
        raise ValueError("standard deviations must be > 0")
    return float(
        np.sum(
            np.log(p_std / q_std)
            + (q_std**2 + (q_mu - p_mu) ** 2) / (2.0 * p_std**2)
            - 0.5
        )
    )


def sample_reparameterized(state: VariationalState, seed: int) -> np.ndarray:
    """One draw mu + softplus(rho)·ε with ε ~ N(0, I); deterministic per seed."""
    eps = np.random.default_rng(seed).standard_normal(state.mu.size)
    return state.mu + state.std * eps


def _prior_arrays(dim: int, latent: bool, prior: PriorSpec):
    p_mu = np.zeros(dim)
    p_std = np.full(dim, prior.weight_std)
    if latent:
        p_mu[-2:] = prior.latent_mean
        p_std[-2:] = prior.latent_std
    return p_mu, p_std


class ElboObjective:
    """Negative ELBO at a fixed reparameterization noise vector, with exact
    gradients in (mu, rho). Latent log10 kinetics ride along as the last
    two coordinates when a dataset is given."""

    def __init__(
        self,
        cfg: ColumnConfig,
        colloc: CollocationSet,
        noise: NoiseScales,
        prior: PriorSpec,
        dataset=None,
        beta_kl: float = 1.0,
        spec: MlpSpec = DEFAULT_SPEC,
        term_weights: dict = None,
    ):
        self.cfg = cfg
        self.spec = spec
        self.latent = dataset is not None
        self.n_net = spec.param_count
        self.dim = 2 * self.n_net + (2 if self.latent else 0)
        self.beta_kl = beta_kl
        self.loss = PhysicsLoss(
            cfg, colloc, noise, dataset=dataset, spec=spec, term_weights=term_weights
        )
        self.p_mu, self.p_std = _prior_arrays(self.dim, self.latent, prior)

    def _split(self, w):
        params_c = w[: self.n_net]
        params_s = w[self.n_net : 2 * self.n_net]
        if self.latent:
            ka, kd = 10.0 ** w[-2], 10.0 ** w[-1]
        else:
            ka, kd = self.cfg.attach, self.cfg.detach
        return params_c, params_s, ka, kd

    def value(self, mu, rho, eps):
        w = mu + softplus(rho) * eps
        nll, comps, _ = self.loss.value_and_grad(*self._split(w), want_grad=False)
        kl = kl_gaussian_diag(mu, softplus(rho), self.p_mu, self.p_std)
        return nll + self.beta_kl * kl, (nll, kl, comps)

    def value_and_grad(self, mu, rho, eps):
        """Returns (objective, (nll, kl, components), g_mu, g_rho)."""
        q_std = softplus(rho)
        sig = expit(rho)  # d softplus / d rho
        w = mu + q_std * eps
        params_c, params_s, ka, kd = self._split(w)
        nll, comps, grads = self.loss.value_and_grad(params_c, params_s, ka, kd)
        g_w = np.empty(self.dim)
        g_w[: self.n_net] = grads["g_params_c"]
        g_w[self.n_net : 2 * self.n_net] = grads["g_params_s"]
        if self.latent:
            g_w[-2] = grads["g_ka"] * ka * LN10
            g_w[-1] = grads["g_kd"] * kd * LN10
        kl = kl_gaussian_diag(mu, q_std, self.p_mu, self.p_std)
        g_mu = g_w + self.beta_kl * (mu - self.p_mu) / self.p_std**2
        g_std_kl = q_std / self.p_std**2 - 1.0 / q_std
        g_rho = (g_w * eps + self.beta_kl * g_std_kl) * sig
        return nll + self.beta_kl * kl, (nll, kl, comps), g_mu, g_rho


def make_elbo_objective(
    cfg: ColumnConfig,
    colloc: CollocationSet,
    noise: NoiseScales,
    prior: PriorSpec,
    dataset=None,
    beta_kl: float = 1.0,
    spec: MlpSpec = DEFAULT_SPEC,
    term_weights: dict = None,
) -> ElboObjective:
    return ElboObjective(
        cfg, colloc, noise, prior, dataset=dataset, beta_kl=beta_kl, spec=spec,
        term_weights=term_weights,
    )


def _iteration_noise(seed: int, i: int, dim: int) -> np.ndarray:
    """Reparameterization noise for one Adam step, deterministic per
    (seed, iteration)."""
    return np.random.default_rng((seed, i)).standard_normal(dim)


def train(
    cfg: ColumnConfig,
    colloc: CollocationSet,
    noise: NoiseScales,
    prior: PriorSpec = PriorSpec(),
    mode: str = "forward",
    dataset=None,
    iters: int = 20000,
    lr: float = 3e-3,
    seed: int = 0,
    init_std: float = 0.5,
    init_posterior_std: float = 1e-2,
    beta_kl: float = 1.0,
    preset_name: str = "balanced",
    spec: MlpSpec = DEFAULT_SPEC,
    term_weights: dict = None,
    log_every: int = 0,
) -> TrainReport:
    """Ascend the single-sample reparameterized ELBO with Adam
    (β1=0.9, β2=0.999, ε=1e-8) on (mu, rho)."""
    if mode not in ("forward", "inverse"):
        raise ValueError(f"mode must be 'forward' or 'inverse', got {mode!r}")
    if mode == "inverse" and dataset is None:
        raise ValueError("inverse mode requires a dataset")
    if mode == "forward":
        dataset = None
    objective = make_elbo_objective(
        cfg, colloc, noise, prior, dataset=dataset, beta_kl=beta_kl, spec=spec,
        term_weights=term_weights,
    )
    dim, latent = objective.dim, objective.latent

    rng = np.random.default_rng(seed)
    mu = rng.normal(0.0, init_std, size=dim)
    rho = np.full(dim, float(softplus_inverse(init_posterior_std)))
    if latent:
        mu[-2:] = prior.latent_mean

    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    m_mu = np.zeros(dim)
    v_mu = np.zeros(dim)
    m_rho = np.zeros(dim)
    v_rho = np.zeros(dim)
    trace = np.zeros((iters, 11))
    term_names = LossBreakdown.TERMS + (("r_data",) if latent else ())
    t0 = time.monotonic()
    for i in range(iters):
        eps = _iteration_noise(seed, i, dim)
        obj, (nll, kl, comps), g_mu, g_rho = objective.value_and_grad(mu, rho, eps)
        if not np.isfinite(obj):
            for name in term_names:
                if not np.isfinite(comps.get(name, 0.0)):
                    raise TrainingError(
                        f"non-finite ELBO at iteration {i}: term {name} diverged"
                    )
            raise TrainingError(f"non-finite ELBO at iteration {i}")
        t = i + 1
        c1 = 1.0 / (1.0 - b1**t)
        c2 = 1.0 / (1.0 - b2**t)
        for par, g, m, v in ((mu, g_mu, m_mu, v_mu), (rho, g_rho, m_rho, v_rho)):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            par -= lr * (c1 * m) / (np.sqrt(c2 * v) + adam_eps)
        trace[i] = (
            i,
            comps["r_pde_c"],
            comps["r_pde_s"],
            comps["r_inlet"],
            comps["r_outlet"],
            comps["r_init_c"],
            comps["r_init_s"],
            comps.get("r_data", np.nan),
            nll,
            kl,
            -obj,
        )
        if log_every and (i % log_every == 0 or i == iters - 1):
            print(
                f"iter {i:6d}  elbo {-obj:.6g}  nll {nll:.6g}  kl {kl:.6g}",
                flush=True,
            )
    elbo_trace = trace[:, 10].copy()
    wall = time.monotonic() - t0
    state = VariationalState(mu, rho, latent)
    return TrainReport(
        state=state,
        elbo_trace=elbo_trace,
        trace=trace,
        wall_clock=wall,
        seed=seed,
        preset=preset_name,
        mode=mode,
        iters=iters,
        lr=lr,
    )


@dataclass
class PredictiveEnsemble:
    """Per-sample breakthrough curves and retention profiles with pointwise
    summary statistics, in physical units."""

    times: np.ndarray
    btc_samples: np.ndarray  # (n_samples, n_times)
    btc_mean: np.ndarray
    btc_std: np.ndarray
    btc_min: np.ndarray
    btc_max: np.ndarray
    x: np.ndarray
    ret_samples: np.ndarray
    ret_mean: np.ndarray
    ret_std: np.ndarray
    ret_min: np.ndarray
    ret_max: np.ndarray


def posterior_predict(
    state: VariationalState,
    cfg: ColumnConfig,
    n_samples: int = 50,
    times: Optional[np.ndarray] = None,
    x: Optional[np.ndarray] = None,
    seed: int = 0,
    spec: MlpSpec = DEFAULT_SPEC,
) -> PredictiveEnsemble:
    """Draw parameter samples and evaluate each sample's outlet
    breakthrough curve and final-time retention profile."""
    if times is None:
        times = np.linspace(0.0, cfg.horizon, 201)
    if x is None:
        x = np.linspace(0.0, cfg.length, 201)
    times = np.asarray(times, dtype=float)
    x = np.asarray(x, dtype=float)
    n_net = state.network_dim() // 2
    btc_pts = np.column_stack([np.ones(times.size), times / cfg.horizon])
    ret_pts = np.column_stack([x / cfg.length, np.ones(x.size)])
    rng = np.random.default_rng(seed)
    std = state.std
    btc = np.empty((n_samples, times.size))
    ret = np.empty((n_samples, x.size))
    for k in range(n_samples):
        w = state.mu + std * rng.standard_normal(state.mu.size)
        fc, _ = forward_pass(w[:n_net], btc_pts, spec, False, False, False)
        fs, _ = forward_pass(w[n_net : 2 * n_net], ret_pts, spec, False, False, False)
        btc[k] = cfg.inlet_peak * fc["u"]
        ret[k] = cfg.inlet_peak * fs["u"]
    return PredictiveEnsemble(
        times=times,
        btc_samples=btc,
        btc_mean=btc.mean(axis=0),
        btc_std=btc.std(axis=0),
        btc_min=btc.min(axis=0),
        btc_max=btc.max(axis=0),
        x=x,
        ret_samples=ret,
        ret_mean=ret.mean(axis=0),
        ret_std=ret.std(axis=0),
        ret_min=ret.min(axis=0),
        ret_max=ret.max(axis=0),
    )


@dataclass
class KineticsPosterior:
    ka_mean: float
    ka_std: float
    kd_mean: float
    kd_std: float


def inverse_posterior_summary(
    state: VariationalState, n_samples: int = 50, seed: int = 0
) -> KineticsPosterior:
    """Sample the latent log10 coefficients and report linear-space
    moments (s⁻¹)."""
    if not state.latent:
        raise ValueError("state carries no latent kinetics (forward-mode state)")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_samples, 2))
    lam = state.mu[-2:] + state.std[-2:] * eps
    k = 10.0**lam
    ddof = 1 if n_samples > 1 else 0
    return KineticsPosterior(
        ka_mean=float(k[:, 0].mean()),
        ka_std=float(k[:, 0].std(ddof=ddof)),
        kd_mean=float(k[:, 1].mean()),
        kd_std=float(k[:, 1].std(ddof=ddof)),
    )


def save_state(path, state: VariationalState) -> None:
    kind = KIND_VI_INVERSE if state.latent else KIND_VI_FORWARD
    save_vector(path, np.concatenate([state.mu, state.rho]), kind=kind)


def load_state(path) -> VariationalState:
    vec, kind = load_vector(path)
    if kind not in (KIND_VI_FORWARD, KIND_VI_INVERSE):
        raise ValueError(f"{path}: not a variational-state checkpoint")
    half = vec.size // 2
    return VariationalState(vec[:half], vec[half:], latent=kind == KIND_VI_INVERSE)
