"""Neural mutual-information estimation via the Donsker-Varadhan bound.

Two statistic networks are trained side by side: a natural estimator whose
input is a pooled embedding of the clean cloud, and an adversarial estimator
whose input is a pooled embedding of the displacement field. Each is scored
against the model's logits on the adversarial input, with negatives built by
pairing the same inputs with derangement-shuffled logits.

The DV lower bound for a statistic T is

    I_hat = E_joint[T] - log E_marginal[exp(T)]

which is invariant to adding a constant to T and lower-bounds the true MI.
The marginal expectation is computed with a max-subtracted log-mean-exp, and
its gradient uses an exponential-moving-average denominator to de-bias the
estimator updates.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import scipy.stats

from .errors import (
    ConfigurationError,
    DivergenceError,
    InsufficientDataError,
    NumericalFailureError,
)

_ESTIMATE_CAP = 20.0
MIN_SUMMARY_WINDOW = 30
# weight of the disentangling cross-term in the estimator objectives; at
# weight 1 the cross pressure destabilizes the statistic network, so it is
# applied as a soft discount
DEFAULT_CROSS_WEIGHT = 0.01

CALL_COUNTS = Counter()


class StatisticNetwork(nn.Module):
    """Small MLP T(u, v) -> scalar on concatenated (input-rep, logits) pairs."""

    def __init__(self, u_dim: int, v_dim: int, hidden: int = 128, depth: int = 2, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        dims = [u_dim + v_dim] + [hidden] * depth
        layers = []
        for i in range(depth):
            layers += [nn.Linear(dims[i], dims[i + 1]), nn.ReLU()]
        layers.append(nn.Linear(hidden, 1))
        self.net = nn.Sequential(*layers)
        self.double()

    def forward(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([u, v], dim=1)).squeeze(1)


@dataclass
class MIBatchEstimate:
    value: float
    joint_term: float
    marginal_term: float
    per_sample_T: np.ndarray
    kind: str = "natural"


def pool_representation(points: np.ndarray | torch.Tensor) -> np.ndarray:
    """Fixed-length embedding of a variable-size point set: per-axis mean + max."""
    pts = points.detach().numpy() if isinstance(points, torch.Tensor) else points
    pts = np.nan_to_num(pts, nan=0.0)
    return np.concatenate([pts.mean(axis=0), pts.max(axis=0)])


POOLED_DIM = 6


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation with no fixed point."""
    if n < 2:
        raise ConfigurationError("derangement needs n >= 2")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def _as_tensor(a):
    if isinstance(a, torch.Tensor):
        return a.double()
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def log_mean_exp(t: torch.Tensor) -> torch.Tensor:
    return torch.logsumexp(t, dim=0) - np.log(len(t))


def dv_estimate(T: StatisticNetwork, positives, negatives, kind: str = "natural") -> MIBatchEstimate:
    """Evaluate the DV bound given positive and negative (u, v) pair batches.

    `positives`/`negatives` are (u_batch, v_batch) tuples. Raises
    NumericalFailureError if the statistic overflows the stabilized
    log-mean-exp.
    """
    pos_u, pos_v = (_as_tensor(a) for a in positives)
    neg_u, neg_v = (_as_tensor(a) for a in negatives)
    if len(pos_u) == 0 or len(neg_u) == 0:
        raise ConfigurationError("dv_estimate requires non-empty pair batches")
    with torch.no_grad():
        t_pos = T(pos_u, pos_v)
        t_neg = T(neg_u, neg_v)
    if not (torch.isfinite(t_pos).all() and torch.isfinite(t_neg).all()):
        raise NumericalFailureError(
            "statistic network produced non-finite values",
            max_statistic=float(torch.nan_to_num(torch.cat([t_pos, t_neg])).max()),
        )
    joint = float(t_pos.mean())
    marginal = float(log_mean_exp(t_neg))
    if not np.isfinite(marginal):
        raise NumericalFailureError(
            "marginal log-mean-exp overflowed", max_statistic=float(t_neg.max())
        )
    return MIBatchEstimate(
        value=joint - marginal,
        joint_term=joint,
        marginal_term=marginal,
        per_sample_T=t_pos.numpy(),
        kind=kind,
    )


class MineTrainer:
    """Optimizes one statistic network to tighten the DV bound.

    The marginal-term gradient is de-biased with an exponential moving
    average of E[exp(T)] (rate `ema_rate`).
    """

    def __init__(self, T: StatisticNetwork, lr: float = 1e-3, ema_rate: float = 0.01,
                 kind: str = "natural"):
        self.T = T
        self.kind = kind
        self.optimizer = torch.optim.Adam(T.parameters(), lr=lr)
        self.ema_rate = ema_rate
        self.ema = None

    def _surrogate(self, pos, neg, cross=None, cross_weight=DEFAULT_CROSS_WEIGHT):
        pos_u, pos_v = (_as_tensor(a) for a in pos)
        neg_u, neg_v = (_as_tensor(a) for a in neg)
        t_pos = self.T(pos_u, pos_v)
        t_neg = self.T(neg_u, neg_v)
        exp_neg = torch.exp(t_neg - t_neg.detach().max()) * torch.exp(t_neg.detach().max())
        mean_exp = exp_neg.mean()
        if self.ema is None:
            self.ema = float(mean_exp.detach())
        else:
            self.ema = (1 - self.ema_rate) * self.ema + self.ema_rate * float(mean_exp.detach())
        loss = -(t_pos.mean() - mean_exp / max(self.ema, 1e-12))
        if cross is not None:
            cu, cv = (_as_tensor(a) for a in cross)
            loss = loss + cross_weight * self.T(cu, cv).mean()
        return loss, t_pos, t_neg

    def step(self, positives, negatives, cross=None,
             cross_weight=DEFAULT_CROSS_WEIGHT) -> MIBatchEstimate:
        """One maximization step; returns the post-hoc DV estimate on the batch."""
        CALL_COUNTS[f"mine_step_{self.kind}"] += 1
        loss, _, _ = self._surrogate(positives, negatives, cross, cross_weight)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        est = dv_estimate(self.T, positives, negatives, kind=self.kind)
        if est.value > _ESTIMATE_CAP:
            raise DivergenceError(f"MI estimate diverged: {est.value:.3f} nats")
        return est


def train_estimators(trainer_n: MineTrainer, trainer_a: MineTrainer, stream, steps: int,
                     seed: int = 0, cross_weight: float = DEFAULT_CROSS_WEIGHT):
    """Co-train the natural and adversarial estimators on a batch stream.

    `stream` is a callable(step) returning (clean_reps, adv_reps, rho_reps,
    logits) arrays of equal batch size. The natural estimator scores clean
    representations against the logits, discounted by a cross-term on the
    adversarial representations; the adversarial estimator scores
    displacement representations against the logits, discounted by a
    cross-term anchored at the zero displacement (the clean point of the
    displacement space). Returns the final (natural, adversarial) estimates.
    """
    rng = np.random.default_rng(seed)
    last = (None, None)
    for t in range(steps):
        clean_reps, adv_reps, rho_reps, logits = stream(t)
        clean_reps = np.asarray(clean_reps, dtype=np.float64)
        adv_reps = np.asarray(adv_reps, dtype=np.float64)
        rho_reps = np.asarray(rho_reps, dtype=np.float64)
        logits = np.asarray(logits, dtype=np.float64)
        perm = derangement(len(logits), rng)
        shuffled = logits[perm]
        est_n = trainer_n.step(
            (clean_reps, logits),
            (clean_reps, shuffled),
            cross=(adv_reps, logits),
            cross_weight=cross_weight,
        )
        est_a = trainer_a.step(
            (rho_reps, logits),
            (rho_reps, shuffled),
            cross=(np.zeros_like(rho_reps), logits),
            cross_weight=cross_weight,
        )
        last = (est_n, est_a)
    return last


@dataclass
class DecompositionReport:
    i_total: float
    i_natural: float
    i_adversarial: float

    @property
    def residual(self) -> float:
        return self.i_total - (self.i_natural + self.i_adversarial)


def decompose_mi(i_total: float, i_natural: float, i_adversarial: float) -> DecompositionReport:
    """Diagnostic report of how well total MI splits into natural + adversarial."""
    return DecompositionReport(i_total, i_natural, i_adversarial)


def per_sample_mi_proxy(estimate: MIBatchEstimate) -> np.ndarray:
    """Pointwise DV contribution per positive pair: T_i - log-mean-exp(marginal).

    Its mean equals the batch estimate exactly.
    """
    return estimate.per_sample_T - estimate.marginal_term


@dataclass
class MISummaryStats:
    """Nine-component statistics vector consumed by the pacing advisor."""

    mean_IN: float
    mean_IA: float
    var_IN: float
    var_IA: float
    skew_IN: float
    skew_IA: float
    f_low: float
    H_IN: float
    H_IA: float

    def as_vector(self) -> np.ndarray:
        return np.array(
            [
                self.mean_IN, self.mean_IA, self.var_IN, self.var_IA,
                self.skew_IN, self.skew_IA, self.f_low, self.H_IN, self.H_IA,
            ]
        )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_vector())))


def _skew(values: np.ndarray) -> float:
    if np.var(values) < 1e-18:
        return 0.0
    return float(scipy.stats.skew(values, bias=False))


def summarize(natural_window, adversarial_window, natural_clusters, adversarial_clusters) -> MISummaryStats:
    """Summary statistics over sliding windows of per-sample MI proxies.

    Cluster objects come from the curriculum module and must be fit on the
    same windows. Requires at least MIN_SUMMARY_WINDOW samples per stream.
    """
    nat = np.asarray(natural_window, dtype=np.float64)
    adv = np.asarray(adversarial_window, dtype=np.float64)
    if len(nat) < MIN_SUMMARY_WINDOW or len(adv) < MIN_SUMMARY_WINDOW:
        raise InsufficientDataError(
            f"summary window needs >= {MIN_SUMMARY_WINDOW} samples per stream"
        )
    f_low = float(np.mean(adversarial_clusters.assignments == 0))
    return MISummaryStats(
        mean_IN=float(nat.mean()),
        mean_IA=float(adv.mean()),
        var_IN=float(nat.var()),
        var_IA=float(adv.var()),
        skew_IN=_skew(nat),
        skew_IA=_skew(adv),
        f_low=f_low,
        H_IN=_cluster_entropy(natural_clusters.frequencies),
        H_IA=_cluster_entropy(adversarial_clusters.frequencies),
    )


def _cluster_entropy(frequencies) -> float:
    p = np.asarray(frequencies, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
