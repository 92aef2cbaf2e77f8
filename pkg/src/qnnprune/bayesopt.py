"""Gaussian-process surrogate and UCB acquisition for per-layer ratios.

The per-layer objective is the compound loss

    y(x) = L_c(x) + a1 * L_params(x) + (a1/4) * L_size(x)

where ``L_c`` is the classification error on a calibration subset and
``L_params`` / ``L_size`` are the parameters and bits remaining in the
whole network, all in percent of the unpruned baseline.  A squared
exponential GP models y over the ratio region; the confidence-bound score
``mu - kappa * sigma`` is *minimized* to propose new ratios, which explores
optimistically while the end goal is the minimum observed loss.

The search protocol is fixed: ``n_init`` evenly spaced observations over
the bounded region followed by ``n_explore`` acquisition-driven ones; the
returned ratio is the argmin of the observed losses, ties broken toward
the larger ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from qnnprune import engine
from qnnprune.errors import QnnError
from qnnprune.network import NetworkDef, account, apply_filter_prune


@dataclass
class GpConfig:
    length_scale: float = 0.2     # on the [0, 1]-normalized ratio axis
    noise_var: float = 1e-6
    min_signal_var: float = 1.0


@dataclass
class BoConfig:
    bounds: tuple = (0.0, 0.40)
    kappa: float = 2.5
    n_init: int = 5
    n_explore: int = 5
    alpha1: float = 1.0
    grid_points: int = 401
    gp: GpConfig = field(default_factory=GpConfig)

    @property
    def alpha2(self) -> float:
        return self.alpha1 / 4.0


class GpState:
    """Observations plus the cached information matrix (inverse covariance)."""

    def __init__(self, x, y, cfg: GpConfig | None = None):
        self.cfg = cfg or GpConfig()
        self.x = np.asarray(x, dtype=np.float64)
        self.y_raw = np.asarray(y, dtype=np.float64)
        if self.x.shape != self.y_raw.shape or self.x.ndim != 1 or not len(self.x):
            raise QnnError("GP needs matching non-empty 1-D X and Y")
        self.y_mean = float(self.y_raw.mean())
        self.y_std = float(self.y_raw.std()) if len(self.y_raw) > 1 else 1.0
        if self.y_std == 0.0:
            self.y_std = 1.0
        self.y = (self.y_raw - self.y_mean) / self.y_std
        self.signal_var = max(float(self.y.var()), self.cfg.min_signal_var)
        cov = self._kernel(self.x, self.x)
        cov[np.diag_indices_from(cov)] += self.cfg.noise_var
        try:
            self._cho = linalg.cho_factor(cov, lower=True)
        except linalg.LinAlgError as e:
            raise QnnError(f"observation covariance not positive definite: {e}")
        self.information = linalg.cho_solve(self._cho, np.eye(len(self.x)))
        # weights for the mean term: C_N^-1 (Y - m_X), via the factorization
        self._alpha = linalg.cho_solve(self._cho, self.y)

    def _kernel(self, a, b):
        ell = self.cfg.length_scale
        d = np.subtract.outer(np.asarray(a, float), np.asarray(b, float))
        return self.signal_var * np.exp(-0.5 * (d / ell) ** 2)

    def predictive(self, x_hat: float) -> tuple[float, float]:
        """Predictive mean and variance at one point, on the raw Y scale.

        Solves against the Cholesky factors rather than multiplying the
        cached inverse; same quantities, better conditioning at tiny jitter.
        """
        k_star = self._kernel([x_hat], self.x)[0]
        mu = float(k_star @ self._alpha)  # prior mean is 0 on standardized Y
        v = linalg.cho_solve(self._cho, k_star)
        var = float(self._kernel([x_hat], [x_hat])[0, 0] - k_star @ v)
        mu_raw = self.y_mean + self.y_std * mu
        var_raw = max(var, 0.0) * self.y_std ** 2
        return mu_raw, var_raw


def predictive(gp: GpState, x_hat: float) -> tuple[float, float]:
    return gp.predictive(x_hat)


def ucb(mu: float, sigma: float, kappa: float) -> float:
    """Confidence-bound score mu - kappa * sigma."""
    return mu - kappa * sigma


def objective_loss(error_pct: float, params_remaining_pct: float,
                   size_remaining_pct: float, alpha1: float) -> float:
    """Compound loss over error, remaining parameters, and remaining bits."""
    for v in (error_pct, params_remaining_pct, size_remaining_pct):
        if not 0.0 <= v <= 100.0:
            raise QnnError(f"loss terms must be percentages, got {v}")
    return error_pct + alpha1 * params_remaining_pct + (alpha1 / 4.0) * size_remaining_pct


def next_candidate(gp: GpState, cfg: BoConfig) -> float:
    """Grid-minimize the confidence bound over the bounded ratio region."""
    lo, hi = cfg.bounds
    grid = np.linspace(lo, hi, cfg.grid_points)
    span = hi - lo if hi > lo else 1.0
    scores = np.empty_like(grid)
    for i, x in enumerate(grid):
        mu, var = gp.predictive((x - lo) / span)
        scores[i] = ucb(mu, math.sqrt(var), cfg.kappa)
    return float(grid[int(np.argmin(scores))])


@dataclass
class BoObservation:
    step: int
    ratio: float
    error_pct: float
    params_pct: float
    size_pct: float
    loss: float
    mu: float = float("nan")
    sigma: float = float("nan")


def prune_count_for_ratio(ratio: float, live: int) -> int:
    """ceil(ratio * live) filters, never leaving fewer than one survivor."""
    count = math.ceil(ratio * live)
    return max(0, min(count, live - 1))


def optimize_layer_ratio(net: NetworkDef, layer_id: str, prune_order: list,
                         calib_x, calib_y, cfg: BoConfig,
                         baseline=None, eval_seed: int = 0):
    """Search the pruning ratio of one layer with the 5+5 GP protocol.

    ``prune_order`` lists the layer's live filters prune-first.  Each
    observation applies a temporary mask, evaluates the compound loss on
    the calibration subset with no fine-tuning, and reverts the mask.
    Returns ``(best_ratio, trace)``.
    """
    layer = net.layer(layer_id)
    live = int(layer.out_mask.sum())
    if live <= 1:
        return 0.0, []
    if baseline is None:
        baseline = account(net)
    lo, hi = cfg.bounds

    def observe(step: int, ratio: float) -> BoObservation:
        count = prune_count_for_ratio(ratio, live)
        snapshot = net.save_masks()
        try:
            if count:
                apply_filter_prune(net, layer_id, prune_order[:count])
            res = engine.evaluate(net, calib_x, calib_y, passes=1, seed=eval_seed)
            now = account(net)
        finally:
            net.restore_masks(snapshot)
        params_pct = 100.0 * now.total_params / baseline.total_params
        size_pct = 100.0 * now.total_bits / baseline.total_bits
        loss = objective_loss(res.top1_error_pct, params_pct, size_pct, cfg.alpha1)
        return BoObservation(step, ratio, res.top1_error_pct,
                             params_pct, size_pct, loss)

    trace = [observe(i, float(r))
             for i, r in enumerate(np.linspace(lo, hi, cfg.n_init))]
    span = hi - lo if hi > lo else 1.0
    for step in range(cfg.n_init, cfg.n_init + cfg.n_explore):
        xs = [(o.ratio - lo) / span for o in trace]
        gp = GpState(xs, [o.loss for o in trace], cfg.gp)
        ratio = next_candidate(gp, cfg)
        obs = observe(step, ratio)
        obs.mu, var = gp.predictive((ratio - lo) / span)
        obs.sigma = math.sqrt(var)
        trace.append(obs)

    best = min(trace, key=lambda o: (o.loss, -o.ratio))
    return best.ratio, trace
