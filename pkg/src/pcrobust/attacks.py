"""Adversarial point-cloud attacks: addition, removal, and shifting families.

Shifting attacks perturb only the salient points (top input-gradient-norm
quantile) and keep the displacement field inside the max-norm budget. The
adversarial loss throughout is the negated cross-entropy of the true label
(untargeted).
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .classifier import PointCloudClassifier, to_tensor
from .data import PointCloud
from .errors import ConfigurationError

ATTACK_KINDS = ("add", "drop", "ifgm", "pgd", "perturb", "knn", "sia")

# call bookkeeping: lets the training harness assert an arm never touched
# attack code paths
CALL_COUNTS = Counter()


@dataclass
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 0.05
    steps: int = 10
    step_size: float = 0.01
    lambda_tradeoff: float = 1.0
    k_points: int = 8
    saliency_quantile: float = 0.5
    seed: int = 0

    def validate(self, n_points: int | None = None):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}", field="kind")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0", field="epsilon")
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0", field="steps")
        if not (0 < self.saliency_quantile <= 1):
            raise ConfigurationError(
                "saliency_quantile must lie in (0, 1]", field="saliency_quantile"
            )
        if self.kind == "drop" and n_points is not None and self.k_points >= n_points:
            raise ConfigurationError("k_points must be < N for drop", field="k_points")


@dataclass
class PerturbationRecord:
    """Output of one attack on one cloud.

    `rho` conventions: shifting attacks store the exact displacement field
    (perturbed - original). Drop stores an N x 3 field with NaN sentinel rows
    at removed indices. Add stores an (N+k) x 3 field whose added rows hold
    the offset from the nearest original point. Budget norms are computed
    over finite rows only.
    """

    original: PointCloud
    perturbed: PointCloud
    rho: np.ndarray
    kind: str
    budget_used: dict
    success: bool
    meta: dict = field(default_factory=dict)


def _budget(rho: np.ndarray) -> dict:
    finite = rho[np.all(np.isfinite(rho), axis=1)]
    if finite.size == 0:
        return {"max_norm": 0.0, "mean_norm": 0.0}
    norms = np.linalg.norm(finite, axis=1)
    return {"max_norm": float(np.abs(finite).max()), "mean_norm": float(norms.mean())}


def saliency_scores(model: PointCloudClassifier, cloud: PointCloud, label: int) -> np.ndarray:
    """Per-point saliency: row norms of the input gradient of the loss."""
    pts = to_tensor(cloud).unsqueeze(0).requires_grad_(True)
    loss = F.cross_entropy(model(pts), torch.tensor([label]))
    (grad,) = torch.autograd.grad(loss, pts)
    return np.linalg.norm(grad[0].numpy(), axis=1)


def saliency_mask(scores: np.ndarray, quantile: float) -> np.ndarray:
    """Boolean eligibility mask selecting the top `quantile` fraction of points."""
    if quantile >= 1.0:
        return np.ones(len(scores), dtype=bool)
    threshold = np.quantile(scores, 1.0 - quantile)
    mask = scores >= threshold
    if not mask.any():  # all-equal scores collapse the quantile; keep top-1
        mask[np.argmax(scores)] = True
    return mask


def _saliency_mask_tensor(model, pts, labels, quantile):
    """Batched saliency mask, (B, N, 1) float64."""
    pts = pts.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(model(pts), labels)
    (grad,) = torch.autograd.grad(loss, pts)
    scores = grad.norm(dim=2)
    if quantile >= 1.0:
        return torch.ones_like(scores).unsqueeze(2)
    thresh = torch.quantile(scores, 1.0 - quantile, dim=1, keepdim=True)
    mask = (scores >= thresh).double()
    return mask.unsqueeze(2)


def chamfer_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Symmetric mean squared nearest-neighbor distance between point sets."""
    d2 = torch.cdist(a, b) ** 2
    return d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()


def knn_mean_distance(points: torch.Tensor, k: int) -> torch.Tensor:
    """Mean distance of each point to its k nearest neighbors (self excluded).

    Translation-invariant by construction.
    """
    if k < 1:
        raise ConfigurationError("neighborhood size must be >= 1", field="k_points")
    d = torch.cdist(points, points)
    d = d + torch.eye(len(points), dtype=d.dtype) * 1e9
    knn = d.topk(k, dim=1, largest=False).values
    return knn.mean()


def estimate_normals(points: np.ndarray, k: int = 8):
    """Per-point unit normals from local PCA over k neighbors.

    Returns (normals, degenerate_mask); neighborhoods of rank < 2 get a
    degenerate flag and a zero normal.
    """
    n = len(points)
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    k_eff = min(k, n - 1)
    normals = np.zeros_like(points)
    degenerate = np.zeros(n, dtype=bool)
    for i in range(n):
        nbrs = np.argpartition(d[i], k_eff - 1)[:k_eff]
        local = points[nbrs] - points[nbrs].mean(axis=0)
        cov = local.T @ local / k_eff
        w, v = np.linalg.eigh(cov)
        if w[1] < 1e-12:  # second-largest eigenvalue ~ 0: rank < 2
            degenerate[i] = True
            continue
        normals[i] = v[:, 0]
    return normals, degenerate


def _prediction(model, pts_tensor):
    with torch.no_grad():
        return int(model(pts_tensor.unsqueeze(0)).argmax(dim=1))


def _record_shift(model, cloud, rho, cfg, meta=None):
    perturbed = PointCloud(points=cloud.points + rho, label=cloud.label)
    # re-derive rho from the stored arrays so perturbed - original == rho holds
    # bit-exactly despite float rounding in the addition
    rho = perturbed.points - cloud.points
    orig_pred = _prediction(model, to_tensor(cloud))
    new_pred = _prediction(model, to_tensor(perturbed))
    return PerturbationRecord(
        original=cloud,
        perturbed=perturbed,
        rho=rho,
        kind=cfg.kind,
        budget_used=_budget(rho),
        success=new_pred != orig_pred,
        meta=meta or {},
    )


def attack_ifgm(model, cloud, label, cfg: AttackConfig) -> PerturbationRecord:
    """Iterated sign-gradient ascent from a zero start, clipped to the budget."""
    cfg.validate(cloud.n_points)
    x = to_tensor(cloud)
    labels = torch.tensor([label])
    mask = torch.from_numpy(
        saliency_mask(saliency_scores(model, cloud, label), cfg.saliency_quantile).astype(float)
    ).unsqueeze(1)
    rho = torch.zeros_like(x)
    for _ in range(cfg.steps):
        pts = (x + rho).unsqueeze(0).requires_grad_(True)
        loss = F.cross_entropy(model(pts), labels)
        (grad,) = torch.autograd.grad(loss, pts)
        rho = rho + cfg.step_size * grad[0].sign() * mask
        rho = rho.clamp(-cfg.epsilon, cfg.epsilon)
    return _record_shift(model, cloud, rho.numpy(), cfg)


def attack_pgd(model, cloud, label, cfg: AttackConfig) -> PerturbationRecord:
    """Projected sign-gradient ascent with a random start inside the budget ball."""
    cfg.validate(cloud.n_points)
    x = to_tensor(cloud)
    labels = torch.tensor([label])
    mask = torch.from_numpy(
        saliency_mask(saliency_scores(model, cloud, label), cfg.saliency_quantile).astype(float)
    ).unsqueeze(1)
    gen = torch.Generator().manual_seed(cfg.seed)
    rho = (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1) * cfg.epsilon * mask
    for _ in range(cfg.steps):
        pts = (x + rho).unsqueeze(0).requires_grad_(True)
        loss = F.cross_entropy(model(pts), labels)
        (grad,) = torch.autograd.grad(loss, pts)
        rho = (rho + cfg.step_size * grad[0].sign() * mask).clamp(-cfg.epsilon, cfg.epsilon)
        rho = rho * mask
    return _record_shift(model, cloud, rho.numpy(), cfg)


def pgd_batch(model, pts: torch.Tensor, labels: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    """Vectorized PGD over a batch; returns the displacement field (B, N, 3)."""
    CALL_COUNTS["pgd_batch"] += 1
    mask = _saliency_mask_tensor(model, pts, labels, cfg.saliency_quantile)
    gen = torch.Generator().manual_seed(cfg.seed)
    rho = (torch.rand(pts.shape, generator=gen, dtype=pts.dtype) * 2 - 1) * cfg.epsilon * mask
    for _ in range(cfg.steps):
        adv = (pts + rho).detach().requires_grad_(True)
        loss = F.cross_entropy(model(adv), labels)
        (grad,) = torch.autograd.grad(loss, adv)
        rho = ((rho + cfg.step_size * grad.sign() * mask).clamp(-cfg.epsilon, cfg.epsilon)) * mask
    return rho.detach()


def _descent_attack(model, cloud, label, cfg, penalty_fn, project_fn=None, meta=None):
    """Shared loop for perturb/knn/sia: Adam descent on
    -CE(f(X+rho), y) + lambda * penalty(X+rho), salient rows only, budget-clamped."""
    x = to_tensor(cloud)
    labels = torch.tensor([label])
    mask = torch.from_numpy(
        saliency_mask(saliency_scores(model, cloud, label), cfg.saliency_quantile).astype(float)
    ).unsqueeze(1)
    rho = torch.zeros_like(x, requires_grad=True)
    opt = torch.optim.Adam([rho], lr=cfg.step_size)
    for _ in range(cfg.steps):
        opt.zero_grad()
        adv = x + rho
        objective = -F.cross_entropy(model(adv.unsqueeze(0)), labels)
        objective = objective + cfg.lambda_tradeoff * penalty_fn(adv, rho)
        objective.backward()
        opt.step()
        with torch.no_grad():
            rho.mul_(mask)
            rho.clamp_(-cfg.epsilon, cfg.epsilon)
            if project_fn is not None:
                rho.copy_(project_fn(rho))
    return _record_shift(model, cloud, rho.detach().numpy(), cfg, meta=meta)


def attack_perturb(model, cloud, label, cfg: AttackConfig) -> PerturbationRecord:
    """Descent on the adversarial loss plus a per-point L2 magnitude penalty."""
    cfg.validate(cloud.n_points)
    return _descent_attack(
        model, cloud, label, cfg, lambda adv, rho: rho.norm(dim=1).sum()
    )


def attack_knn(model, cloud, label, cfg: AttackConfig) -> PerturbationRecord:
    """Descent with a k-nearest-neighbor smoothness penalty on the perturbed cloud."""
    cfg.validate(cloud.n_points)
    k = max(1, cfg.k_points)
    return _descent_attack(
        model, cloud, label, cfg, lambda adv, rho: knn_mean_distance(adv, k)
    )


def tangent_project(rho: np.ndarray, normals: np.ndarray, degenerate: np.ndarray) -> np.ndarray:
    """Remove the normal component of each row; degenerate rows pass through."""
    out = rho.copy()
    valid = ~degenerate
    dots = np.einsum("ij,ij->i", out[valid], normals[valid])
    out[valid] -= dots[:, None] * normals[valid]
    return out


def attack_sia(model, cloud, label, cfg: AttackConfig) -> PerturbationRecord:
    """Perturb-style descent with each displacement projected onto the local
    tangent plane (normals from 8-neighbor PCA on the original cloud)."""
    cfg.validate(cloud.n_points)
    if cloud.n_points < 5:
        raise ConfigurationError("sia needs at least 4 neighbors per point")
    normals, degenerate = estimate_normals(cloud.points, k=8)
    normals_t = torch.from_numpy(normals)
    degenerate_t = torch.from_numpy(degenerate)

    def project(rho_t):
        dots = (rho_t * normals_t).sum(dim=1, keepdim=True)
        projected = rho_t - dots * normals_t
        return torch.where(degenerate_t.unsqueeze(1), rho_t, projected)

    return _descent_attack(
        model,
        cloud,
        label,
        cfg,
        lambda adv, rho: rho.norm(dim=1).sum(),
        project_fn=project,
        meta={"degenerate_skips": int(degenerate.sum())},
    )


def attack_drop(model, cloud, cfg: AttackConfig) -> PerturbationRecord:
    """Greedy saliency-ranked removal of the k most loss-relevant points."""
    cfg.validate(cloud.n_points)
    if cfg.k_points >= cloud.n_points:
        raise ConfigurationError("k_points must be < N for drop", field="k_points")
    orig_pred = _prediction(model, to_tensor(cloud))
    if cfg.k_points == 0:
        rho = np.zeros_like(cloud.points)
        return PerturbationRecord(
            original=cloud, perturbed=cloud, rho=rho, kind="drop",
            budget_used=_budget(rho), success=False,
        )
    scores = saliency_scores(model, cloud, cloud.label)
    removed = np.argsort(scores)[::-1][: cfg.k_points]
    keep = np.setdiff1d(np.arange(cloud.n_points), removed)
    perturbed = PointCloud(points=cloud.points[keep], label=cloud.label)
    rho = np.zeros_like(cloud.points)
    rho[removed] = np.nan
    new_pred = _prediction(model, to_tensor(perturbed))
    return PerturbationRecord(
        original=cloud,
        perturbed=perturbed,
        rho=rho,
        kind="drop",
        budget_used=_budget(rho),
        success=new_pred != orig_pred,
        meta={"removed_indices": removed.tolist()},
    )


def attack_add(model, cloud, cfg: AttackConfig) -> PerturbationRecord:
    """Gradient descent on the positions of k added points, trading attack
    loss against Chamfer distance to the original cloud."""
    cfg.validate(cloud.n_points)
    orig_pred = _prediction(model, to_tensor(cloud))
    if cfg.k_points == 0:
        rho = np.zeros_like(cloud.points)
        return PerturbationRecord(
            original=cloud, perturbed=cloud, rho=rho, kind="add",
            budget_used=_budget(rho), success=False,
        )
    x = to_tensor(cloud)
    labels = torch.tensor([cloud.label])
    gen = torch.Generator().manual_seed(cfg.seed)
    seed_idx = torch.randint(0, cloud.n_points, (cfg.k_points,), generator=gen)
    added = (
        x[seed_idx] + torch.randn(cfg.k_points, 3, generator=gen, dtype=x.dtype) * 0.01
    ).detach().requires_grad_(True)
    opt = torch.optim.Adam([added], lr=cfg.step_size)
    converged = True
    for _ in range(cfg.steps):
        opt.zero_grad()
        union = torch.cat([x, added], dim=0)
        objective = -F.cross_entropy(model(union.unsqueeze(0)), labels)
        objective = objective + cfg.lambda_tradeoff * chamfer_distance(x, union)
        if not torch.isfinite(objective):
            converged = False
            break
        objective.backward()
        opt.step()
    added_np = added.detach().numpy()
    union_np = np.concatenate([cloud.points, added_np], axis=0)
    perturbed = PointCloud(points=union_np, label=cloud.label)
    # rho rows for added points: offset from the nearest original point
    d = np.linalg.norm(added_np[:, None, :] - cloud.points[None, :, :], axis=2)
    nearest = cloud.points[d.argmin(axis=1)]
    rho = np.zeros_like(union_np)
    rho[cloud.n_points :] = added_np - nearest
    new_pred = _prediction(model, to_tensor(perturbed))
    return PerturbationRecord(
        original=cloud,
        perturbed=perturbed,
        rho=rho,
        kind="add",
        budget_used=_budget(rho),
        success=converged and new_pred != orig_pred,
    )


def run_attack(model, cloud: PointCloud, cfg: AttackConfig) -> PerturbationRecord:
    """Dispatch on cfg.kind; the true label is taken from the cloud."""
    cfg.validate(cloud.n_points)
    CALL_COUNTS[cfg.kind] += 1
    if cfg.kind == "add":
        return attack_add(model, cloud, cfg)
    if cfg.kind == "drop":
        return attack_drop(model, cloud, cfg)
    fn = {
        "ifgm": attack_ifgm,
        "pgd": attack_pgd,
        "perturb": attack_perturb,
        "knn": attack_knn,
        "sia": attack_sia,
    }[cfg.kind]
    return fn(model, cloud, cloud.label, cfg)
