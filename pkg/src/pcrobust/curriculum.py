"""Curriculum advisor: MI clustering, entropy regularizer, adaptive weight,
and the trainable pacing network.

The advisor maps a nine-component MI summary vector to a pacing value
eta in (0, 1). Left to minimize the total training loss alone, eta collapses
to zero (it multiplies non-negative terms), so advisor updates carry an
anchor penalty toward a monotone target schedule; the closed-loop term then
modulates pacing around that anchor.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from sklearn.cluster import KMeans

from .errors import (
    AdvisorDivergenceError,
    ConfigurationError,
    DegenerateClusteringError,
)
from .mi import MISummaryStats

N_CLUSTERS = 3


@dataclass
class MIClusters:
    centroids: np.ndarray  # (3,) ascending: low, medium, high
    assignments: np.ndarray  # per-sample cluster index, 0 == low
    frequencies: np.ndarray  # (3,) proportions summing to 1


def fit_clusters(mi_values, k: int = N_CLUSTERS, seed: int = 0, n_restarts: int = 10) -> MIClusters:
    """k-means over scalar MI values, relabeled so index 0 is the lowest centroid."""
    values = np.asarray(mi_values, dtype=np.float64).reshape(-1, 1)
    if len(np.unique(values)) < k:
        raise DegenerateClusteringError(
            f"need at least {k} distinct MI values, got {len(np.unique(values))}"
        )
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_restarts, random_state=seed)
    raw = km.fit_predict(values)
    order = np.argsort(km.cluster_centers_.ravel())
    relabel = np.empty(k, dtype=int)
    relabel[order] = np.arange(k)
    assignments = relabel[raw]
    centroids = km.cluster_centers_.ravel()[order]
    frequencies = np.bincount(assignments, minlength=k) / len(assignments)
    return MIClusters(centroids=centroids, assignments=assignments, frequencies=frequencies)


def entropy_regularizer(clusters: MIClusters) -> float:
    """Shannon entropy of the cluster occupancy, 0*log0 := 0. Range [0, ln 3]."""
    p = np.asarray(clusters.frequencies, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def adaptive_lambda(f_low: float, h_ia: float, alpha: float, beta: float) -> float:
    """alpha * (1 - f_low) * exp(-beta * H); bounded in [0, alpha]."""
    if not (0.0 <= f_low <= 1.0):
        raise ConfigurationError("f_low must lie in [0, 1]", field="f_low")
    if h_ia < 0:
        raise ConfigurationError("entropy must be >= 0", field="h_ia")
    return alpha * (1.0 - f_low) * np.exp(-beta * h_ia)


@dataclass
class AdvisorConfig:
    alpha: float = 1.0
    beta: float = 1.0
    window: int = 64
    advisor_widths: list = field(default_factory=lambda: [32])
    anchor_warmup_frac: float = 0.6
    anchor_weight: float = 1.0
    lr: float = 1e-2
    seed: int = 0

    def validate(self):
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be > 0", field="alpha")
        if self.beta < 0:
            raise ConfigurationError("beta must be >= 0", field="beta")
        if self.window < 30:
            raise ConfigurationError("window must be >= 30", field="window")
        if not (0 < self.anchor_warmup_frac <= 1):
            raise ConfigurationError(
                "anchor_warmup_frac must lie in (0, 1]", field="anchor_warmup_frac"
            )


@dataclass
class CurriculumSignal:
    eta: float
    lambda_adaptive: float
    entropy_term: float
    f_low: float
    step: int


class PacingAdvisor(nn.Module):
    """MLP from the 9 summary statistics to a sigmoid-squashed pacing value.

    The output layer is zero-initialized so a fresh advisor emits exactly 0.5.
    """

    def __init__(self, widths=None, seed: int = 0):
        super().__init__()
        widths = list(widths) if widths else [32]
        torch.manual_seed(seed)
        dims = [9] + widths
        layers = []
        for i in range(len(widths)):
            layers += [nn.Linear(dims[i], dims[i + 1]), nn.Tanh()]
        out = nn.Linear(dims[-1], 1)
        nn.init.zeros_(out.weight)
        nn.init.zeros_(out.bias)
        layers.append(out)
        self.net = nn.Sequential(*layers)
        self.double()

    def forward(self, stats_vec: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(stats_vec)).squeeze(-1)


def anchor_target(step: int, total_steps: int, warmup_frac: float = 0.6) -> float:
    """Monotone pacing target: linear warm-up, then constant 1."""
    ramp = max(1, int(round(total_steps * warmup_frac)))
    return min(1.0, step / ramp)


def advise(advisor: PacingAdvisor, stats: MISummaryStats, step: int, cfg: AdvisorConfig) -> CurriculumSignal:
    """Deterministic pacing signal for one step from the current summary stats."""
    if not stats.is_finite():
        raise ConfigurationError("summary statistics contain non-finite values")
    with torch.no_grad():
        eta = float(advisor(torch.from_numpy(stats.as_vector())))
    lam = adaptive_lambda(stats.f_low, stats.H_IA, cfg.alpha, cfg.beta)
    return CurriculumSignal(
        eta=eta,
        lambda_adaptive=float(lam),
        entropy_term=stats.H_IA,
        f_low=stats.f_low,
        step=step,
    )


class AdvisorTrainer:
    """Closed-loop advisor updates.

    Each update takes one gradient step on the eta-dependent part of the
    total loss plus the anchor penalty; classifier-side quantities enter as
    constants. On gradient explosion the trainer flags fallback mode, in
    which `advise` callers should use the anchor schedule directly.
    """

    _GRAD_CAP = 1e3

    def __init__(self, advisor: PacingAdvisor, cfg: AdvisorConfig, total_steps: int):
        cfg.validate()
        self.advisor = advisor
        self.cfg = cfg
        self.total_steps = total_steps
        self.optimizer = torch.optim.Adam(advisor.parameters(), lr=cfg.lr)
        self.fallback = False

    def target(self, step: int) -> float:
        return anchor_target(step, self.total_steps, self.cfg.anchor_warmup_frac)

    def update(self, stats: MISummaryStats, step: int, adv_loss: float, mi_term: float,
               lambda_mi: float, anchor_weight: float | None = None) -> float:
        """One gradient step on psi; returns the post-update eta."""
        w = self.cfg.anchor_weight if anchor_weight is None else anchor_weight
        vec = torch.from_numpy(stats.as_vector())
        eta = self.advisor(vec)
        loss = eta * (adv_loss + lambda_mi * mi_term)
        loss = loss + w * (eta - self.target(step)) ** 2
        self.optimizer.zero_grad()
        loss.backward()
        grad_norm = torch.sqrt(
            sum((p.grad ** 2).sum() for p in self.advisor.parameters() if p.grad is not None)
        )
        if not torch.isfinite(grad_norm) or grad_norm > self._GRAD_CAP:
            self.fallback = True
            raise AdvisorDivergenceError(
                f"advisor gradient norm {float(grad_norm):.3g} exceeded cap; "
                "falling back to anchor schedule"
            )
        self.optimizer.step()
        with torch.no_grad():
            return float(self.advisor(vec))

    def eta(self, stats: MISummaryStats, step: int) -> float:
        """Current pacing value, honoring fallback mode."""
        if self.fallback:
            return self.target(step)
        with torch.no_grad():
            return float(self.advisor(torch.from_numpy(stats.as_vector())))
