"""Integrated training loop: four-arm protocol, total-loss assembly,
error-bound checking, and forgetting diagnostics.

The total loss per step is

    L_total = L_clean + eta(t) * (L_adv + lambda_mi * I_A_hat)
              + Lambda(f_low, H) * f_low

with terms gated by the arm flags. The inner maximization is approximated by
batched PGD; the MI term differentiates the adversarial DV estimate through
the model logits with the statistic network frozen.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace, asdict

import numpy as np
import torch
import torch.nn.functional as F

from . import attacks, mi
from .attacks import AttackConfig, pgd_batch
from .classifier import ClassifierConfig, PointCloudClassifier, Trainer, accuracy, batch_tensor
from .curriculum import (
    AdvisorConfig,
    AdvisorTrainer,
    PacingAdvisor,
    advise,
    anchor_target,
    fit_clusters,
)
from .errors import (
    AdvisorDivergenceError,
    ConfigurationError,
    DegenerateClusteringError,
    InsufficientDataError,
)
from .mi import MineTrainer, StatisticNetwork, dv_estimate, per_sample_mi_proxy, summarize

ARM_NAMES = ("baseline", "at", "at_mine", "at_mine_ct")


@dataclass(frozen=True)
class TrainingArm:
    name: str
    use_adversarial: bool
    use_mi_term: bool
    use_curriculum: bool

    @classmethod
    def from_name(cls, name: str) -> "TrainingArm":
        flags = {
            "baseline": (False, False, False),
            "at": (True, False, False),
            "at_mine": (True, True, False),
            "at_mine_ct": (True, True, True),
        }
        if name not in flags:
            raise ConfigurationError(f"unknown arm {name!r} (known: {ARM_NAMES})", field="arm")
        return cls(name, *flags[name])


@dataclass
class StepRecord:
    step: int
    clean_loss: float
    adv_loss: float
    mi_term: float
    eta: float
    lambda_adaptive: float
    entropy_term: float
    f_low: float
    total: float
    clean_acc: float | None = None
    adv_acc: float | None = None

    def reconstructed_total(self, arm: TrainingArm) -> float:
        total = self.clean_loss
        if arm.use_adversarial:
            total += self.eta * (self.adv_loss + self.mi_term_contribution(arm))
        if arm.use_curriculum:
            total += self.lambda_adaptive * self.f_low
        return total

    def mi_term_contribution(self, arm: TrainingArm) -> float:
        # mi_term is logged pre-weighting; the lambda_mi weight is folded in
        # by the caller via weighted_mi
        return self.weighted_mi if arm.use_mi_term else 0.0

    weighted_mi: float = 0.0


@dataclass
class RunConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    lambda_mi: float = 0.1
    probe_every: int = 50
    probe_frac: float = 0.2
    mine_lr: float = 1e-3
    mine_warmup_steps: int = 200
    mine_warmup_ratio: int = 5
    cluster_every: int = 25
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1", field="steps")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2", field="batch_size")
        if not (0 < self.probe_frac < 1):
            raise ConfigurationError("probe_frac must lie in (0, 1)", field="probe_frac")


@dataclass
class RunResult:
    records: list
    model: PointCloudClassifier
    probe_clouds: list
    counters: dict
    arm: TrainingArm
    nat_window: list = field(default_factory=list)
    adv_window: list = field(default_factory=list)


def _pool_batch(pts: torch.Tensor) -> torch.Tensor:
    """(B, N, 3) -> (B, 6) mean+max pooled representation."""
    return torch.cat([pts.mean(dim=1), pts.max(dim=1).values], dim=1)


def _differentiable_dv(T, reps, logits, perm):
    """DV estimate that keeps the graph through `logits`; T parameters frozen.

    Clamped at zero: the DV value can go negative on finite batches, and an
    unclamped penalty would reward the classifier for driving it arbitrarily
    far below the MI = 0 floor."""
    t_pos = T(reps, logits)
    t_neg = T(reps, logits[perm])
    value = t_pos.mean() - (torch.logsumexp(t_neg, dim=0) - np.log(len(t_neg)))
    return torch.clamp(value, min=0.0)


def split_dataset(dataset, probe_frac: float, seed: int):
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(dataset))
    n_probe = max(1, int(round(len(dataset) * probe_frac)))
    probe = [dataset[i] for i in idx[:n_probe]]
    train = [dataset[i] for i in idx[n_probe:]]
    return train, probe


def adversarial_accuracy(model, clouds, attack_cfg: AttackConfig) -> float:
    """Accuracy under batched PGD with the given eval budget."""
    pts, labels = batch_tensor(clouds)
    rho = pgd_batch(model, pts, labels, attack_cfg)
    with torch.no_grad():
        pred = model(pts + rho).argmax(dim=1)
    return float((pred == labels).double().mean())


def integrated_loss(model, batch, attack_cfg: AttackConfig, estimators, signal, arm: TrainingArm,
                    lambda_mi: float, rng=None):
    """Assemble the total loss for one batch under the arm's flags.

    `signal` supplies eta / Lambda / f_low (ignored fields default to the
    arm's fixed pacing). Returns (loss_tensor, StepRecord).
    """
    if arm.use_mi_term and not estimators:
        raise ConfigurationError("MI term enabled but no estimator supplied")
    if arm.use_mi_term and not arm.use_adversarial:
        raise ConfigurationError("MI term requires adversarial generation")
    rng = rng or np.random.default_rng(0)
    pts, labels = batch_tensor(batch)
    clean_loss_t = F.cross_entropy(model(pts), labels)
    adv_loss_t = torch.zeros((), dtype=torch.float64)
    mi_t = torch.zeros((), dtype=torch.float64)
    if arm.use_adversarial:
        rho = pgd_batch(model, pts, labels, attack_cfg)
        adv_logits = model(pts + rho)
        adv_loss_t = F.cross_entropy(adv_logits, labels)
        if arm.use_mi_term:
            perm = mi.derangement(len(batch), rng)
            T = estimators["adversarial"].T
            for p in T.parameters():
                p.requires_grad_(False)
            mi_t = _differentiable_dv(T, _pool_batch(rho), adv_logits, perm)
            for p in T.parameters():
                p.requires_grad_(True)
    if arm.use_curriculum:
        eta = signal.eta
        lam = signal.lambda_adaptive
        f_low = signal.f_low
        entropy = signal.entropy_term
    else:
        eta = 1.0 if arm.use_adversarial else 0.0
        lam = f_low = entropy = 0.0
    total_t = clean_loss_t
    if arm.use_adversarial:
        total_t = total_t + eta * (adv_loss_t + lambda_mi * mi_t)
    record = StepRecord(
        step=signal.step if arm.use_curriculum else 0,
        clean_loss=float(clean_loss_t.detach()),
        adv_loss=float(adv_loss_t.detach()) if arm.use_adversarial else 0.0,
        mi_term=float(mi_t.detach()) if arm.use_mi_term else 0.0,
        weighted_mi=lambda_mi * float(mi_t.detach()) if arm.use_mi_term else 0.0,
        eta=eta,
        lambda_adaptive=lam,
        entropy_term=entropy,
        f_low=f_low,
        total=0.0,
    )
    record.total = record.reconstructed_total(arm)
    return total_t, record


def run_arm(
    dataset,
    arm: TrainingArm,
    run_cfg: RunConfig,
    classifier_cfg: ClassifierConfig,
    attack_cfg: AttackConfig,
    advisor_cfg: AdvisorConfig,
) -> RunResult:
    """Execute the full per-step pipeline for one arm: attack generation,
    estimator updates, classifier step, summary statistics, advisor update.

    Fully deterministic given the config seeds. Arms that disable a stage
    never touch its code path (verified through module call counters)."""
    run_cfg.validate()
    advisor_cfg.validate()
    attacks.CALL_COUNTS.clear()
    mi.CALL_COUNTS.clear()

    train_clouds, probe_clouds = split_dataset(dataset, run_cfg.probe_frac, run_cfg.seed)
    torch.manual_seed(run_cfg.seed)
    model = PointCloudClassifier(replace(classifier_cfg, seed=classifier_cfg.seed + run_cfg.seed))
    trainer = Trainer(model, lr=run_cfg.lr)
    rng = np.random.default_rng(run_cfg.seed)

    num_classes = classifier_cfg.num_classes
    estimators = None
    if arm.use_mi_term:
        t_n = StatisticNetwork(mi.POOLED_DIM, num_classes, seed=run_cfg.seed + 1)
        t_a = StatisticNetwork(mi.POOLED_DIM, num_classes, seed=run_cfg.seed + 2)
        estimators = {
            "natural": MineTrainer(t_n, lr=run_cfg.mine_lr, kind="natural"),
            "adversarial": MineTrainer(t_a, lr=run_cfg.mine_lr, kind="adversarial"),
        }

    advisor_trainer = None
    if arm.use_curriculum:
        advisor = PacingAdvisor(advisor_cfg.advisor_widths, seed=advisor_cfg.seed + run_cfg.seed)
        advisor_trainer = AdvisorTrainer(advisor, advisor_cfg, total_steps=run_cfg.steps)

    nat_window = deque(maxlen=advisor_cfg.window)
    adv_window = deque(maxlen=advisor_cfg.window)
    stats = None
    signal_lambda = 0.0
    signal_entropy = 0.0
    signal_f_low = 0.0

    records = []
    order = rng.permutation(len(train_clouds))
    cursor = 0

    for step in range(1, run_cfg.steps + 1):
        if cursor + run_cfg.batch_size > len(order):
            order = rng.permutation(len(train_clouds))
            cursor = 0
        batch = [train_clouds[i] for i in order[cursor : cursor + run_cfg.batch_size]]
        cursor += run_cfg.batch_size
        pts, labels = batch_tensor(batch)

        clean_loss_t = F.cross_entropy(model(pts), labels)
        adv_loss_t = torch.zeros((), dtype=torch.float64)
        mi_value = 0.0
        mi_t = torch.zeros((), dtype=torch.float64)

        rho = None
        if arm.use_adversarial:
            step_attack = replace(attack_cfg, seed=attack_cfg.seed + step)
            rho = pgd_batch(model, pts, labels, step_attack)
            adv_logits = model(pts + rho)
            adv_loss_t = F.cross_entropy(adv_logits, labels)

        if arm.use_mi_term:
            clean_rep = _pool_batch(pts)
            rho_rep = _pool_batch(rho)
            adv_rep = _pool_batch(pts + rho)
            logits_detached = adv_logits.detach()
            n_mine = run_cfg.mine_warmup_ratio if step <= run_cfg.mine_warmup_steps else 1
            for _ in range(n_mine):
                perm = mi.derangement(len(batch), rng)
                est_n = estimators["natural"].step(
                    (clean_rep, logits_detached),
                    (clean_rep, logits_detached[perm]),
                    cross=(adv_rep, logits_detached),
                )
                est_a = estimators["adversarial"].step(
                    (rho_rep, logits_detached),
                    (rho_rep, logits_detached[perm]),
                    cross=(torch.zeros_like(rho_rep), logits_detached),
                )
            nat_window.extend(per_sample_mi_proxy(est_n).tolist())
            adv_window.extend(per_sample_mi_proxy(est_a).tolist())
            # differentiable MI term through the model logits, estimator frozen
            perm = mi.derangement(len(batch), rng)
            for p in estimators["adversarial"].T.parameters():
                p.requires_grad_(False)
            mi_t = _differentiable_dv(
                estimators["adversarial"].T, rho_rep, adv_logits, perm
            )
            for p in estimators["adversarial"].T.parameters():
                p.requires_grad_(True)
            mi_value = float(mi_t.detach())

        if arm.use_curriculum:
            if (
                len(adv_window) >= mi.MIN_SUMMARY_WINDOW
                and len(nat_window) >= mi.MIN_SUMMARY_WINDOW
                and step % run_cfg.cluster_every == 0
            ):
                try:
                    nat_clusters = fit_clusters(list(nat_window), seed=run_cfg.seed)
                    adv_clusters = fit_clusters(list(adv_window), seed=run_cfg.seed)
                    stats = summarize(list(nat_window), list(adv_window), nat_clusters, adv_clusters)
                    sig = advise_signal(advisor_trainer, stats, step, advisor_cfg)
                    signal_lambda = sig.lambda_adaptive
                    signal_entropy = sig.entropy_term
                    signal_f_low = sig.f_low
                except DegenerateClusteringError:
                    pass
            eta = (
                advisor_trainer.eta(stats, step)
                if stats is not None
                else anchor_target(step, run_cfg.steps, advisor_cfg.anchor_warmup_frac)
            )
        elif arm.use_adversarial:
            eta = 1.0
        else:
            eta = 0.0

        total_t = clean_loss_t
        if arm.use_adversarial:
            total_t = total_t + eta * (adv_loss_t + run_cfg.lambda_mi * mi_t)
        loss_value = trainer.step([], loss_tensor=total_t)

        if arm.use_curriculum and stats is not None:
            try:
                advisor_trainer.update(
                    stats, step, float(adv_loss_t.detach()), mi_value, run_cfg.lambda_mi
                )
            except AdvisorDivergenceError:
                pass  # trainer switched itself to the anchor schedule

        record = StepRecord(
            step=step,
            clean_loss=float(clean_loss_t.detach()),
            adv_loss=float(adv_loss_t.detach()) if arm.use_adversarial else 0.0,
            mi_term=mi_value,
            weighted_mi=run_cfg.lambda_mi * mi_value if arm.use_mi_term else 0.0,
            eta=eta,
            lambda_adaptive=signal_lambda if arm.use_curriculum else 0.0,
            entropy_term=signal_entropy if arm.use_curriculum else 0.0,
            f_low=signal_f_low if arm.use_curriculum else 0.0,
            total=0.0,
        )
        record.total = record.reconstructed_total(arm)

        if step % run_cfg.probe_every == 0 or step == run_cfg.steps:
            record.clean_acc = accuracy(model, probe_clouds)
            if arm.use_adversarial:
                record.adv_acc = adversarial_accuracy(model, probe_clouds, attack_cfg)
        records.append(record)

    counters = {"attacks": dict(attacks.CALL_COUNTS), "mine": dict(mi.CALL_COUNTS)}
    return RunResult(records=records, model=model, probe_clouds=probe_clouds,
                     counters=counters, arm=arm,
                     nat_window=list(nat_window), adv_window=list(adv_window))


def advise_signal(advisor_trainer: AdvisorTrainer, stats, step, cfg: AdvisorConfig):
    if advisor_trainer.fallback:
        from .curriculum import CurriculumSignal, adaptive_lambda

        return CurriculumSignal(
            eta=advisor_trainer.target(step),
            lambda_adaptive=adaptive_lambda(stats.f_low, stats.H_IA, cfg.alpha, cfg.beta),
            entropy_term=stats.H_IA,
            f_low=stats.f_low,
            step=step,
        )
    return advise(advisor_trainer.advisor, stats, step, cfg)


@dataclass
class BoundReport:
    delta_pe: float
    mi_estimate: float
    bound: float
    eps_stat: float
    holds: bool
    clean_error: float
    adv_error: float


def pinsker_check(model, attack_cfg: AttackConfig, probe_clouds, estimator: MineTrainer,
                  seed: int = 0) -> BoundReport:
    """Empirical check that the adversarial error increase stays below
    sqrt(I_A_hat / 2) plus a 95% binomial confidence half-width.

    Reported, not guaranteed: the neural estimate lower-bounds the true MI,
    so a violation here can be an estimator artifact."""
    if len(probe_clouds) < 200:
        raise InsufficientDataError("pinsker_check needs a probe set of >= 200 clouds")
    pts, labels = batch_tensor(probe_clouds)
    rho = pgd_batch(model, pts, labels, attack_cfg)
    with torch.no_grad():
        clean_pred = model(pts).argmax(dim=1)
        adv_pred = model(pts + rho).argmax(dim=1)
    n = len(probe_clouds)
    clean_err = float((clean_pred != labels).double().mean())
    adv_err = float((adv_pred != labels).double().mean())
    delta_pe = abs(adv_err - clean_err)

    rho_rep = _pool_batch(rho)
    with torch.no_grad():
        adv_logits = model(pts + rho)
    perm = mi.derangement(n, np.random.default_rng(seed))
    est = dv_estimate(
        estimator.T, (rho_rep, adv_logits), (rho_rep, adv_logits[perm]), kind="adversarial"
    )
    mi_hat = max(est.value, 0.0)
    eps_stat = 1.96 * np.sqrt(
        clean_err * (1 - clean_err) / n + adv_err * (1 - adv_err) / n
    )
    bound = float(np.sqrt(mi_hat / 2.0))
    return BoundReport(
        delta_pe=delta_pe,
        mi_estimate=mi_hat,
        bound=bound,
        eps_stat=float(eps_stat),
        holds=delta_pe <= bound + eps_stat,
        clean_error=clean_err,
        adv_error=adv_err,
    )


@dataclass
class ExactChannelReport:
    p: float
    mi_nats: float
    delta_pe: float
    mean_tv: float
    bound: float
    holds: bool


def xor_channel_bound(p: float) -> ExactChannelReport:
    """Exhaustive evaluation of the error-increase bound on a binary flip channel.

    The label is fixed at 0; the prediction equals the flip indicator rho,
    with P(rho=1) = p. All distributions are enumerated exactly, so both
    sides of Delta_Pe <= E[tv] and E[tv] <= sqrt(I/2) are exact.
    """
    if not (0 < p <= 0.5):
        raise ConfigurationError("p must lie in (0, 0.5]", field="p")
    p_rho = {0: 1.0 - p, 1: p}
    # y' = rho, so the y' marginal equals the rho marginal
    p_out = {0: 1.0 - p, 1: p}
    mi_nats = 0.0
    mean_tv = 0.0
    for r, pr in p_rho.items():
        cond = {0: 1.0 if r == 0 else 0.0, 1: 1.0 if r == 1 else 0.0}
        kl = sum(cond[o] * np.log(cond[o] / p_out[o]) for o in (0, 1) if cond[o] > 0)
        tv = 0.5 * sum(abs(cond[o] - p_out[o]) for o in (0, 1))
        mi_nats += pr * kl
        mean_tv += pr * tv
    err_adv = sum(pr for r, pr in p_rho.items() if r != 0)  # prediction r vs label 0
    err_clean = 0.0
    delta_pe = abs(err_adv - err_clean)
    bound = float(np.sqrt(mi_nats / 2.0))
    return ExactChannelReport(
        p=p,
        mi_nats=float(mi_nats),
        delta_pe=float(delta_pe),
        mean_tv=float(mean_tv),
        bound=bound,
        holds=delta_pe <= mean_tv + 1e-12 and mean_tv <= bound + 1e-12,
    )


@dataclass
class ForgettingReport:
    max_drawdown: float
    final_vs_peak: float
    peak: float
    final: float


def max_drawdown(values) -> float:
    peak = -np.inf
    dd = 0.0
    for v in values:
        peak = max(peak, v)
        dd = max(dd, peak - v)
    return float(dd)


def forgetting_metrics(records) -> ForgettingReport:
    """Drawdown diagnostics over the clean-accuracy probe trajectory."""
    curve = [r.clean_acc for r in records if r.clean_acc is not None]
    if len(curve) < 10:
        raise InsufficientDataError("need >= 10 probe evaluations for forgetting metrics")
    peak = max(curve)
    return ForgettingReport(
        max_drawdown=max_drawdown(curve),
        final_vs_peak=peak - curve[-1],
        peak=peak,
        final=curve[-1],
    )


def save_log(records, arm: TrainingArm, path) -> None:
    """One JSON record per step; float repr is deterministic, so identical
    runs produce byte-identical logs."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"arm": asdict_arm(arm)}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def asdict_arm(arm: TrainingArm) -> dict:
    return {
        "name": arm.name,
        "use_adversarial": arm.use_adversarial,
        "use_mi_term": arm.use_mi_term,
        "use_curriculum": arm.use_curriculum,
    }


def load_log(path):
    """Returns (arm, records)."""
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    arm = TrainingArm.from_name(lines[0]["arm"]["name"])
    records = [StepRecord(**rec) for rec in lines[1:]]
    return arm, records
