"""Covariate-adjustment statistics for 1:1 randomized trials.

A prognostic baseline covariate correlated with the outcome lets an
adjusted analysis match the precision of a larger unadjusted trial. With
per-arm outcome-covariate correlations r_control and r_treatment and
r_avg their mean:

    effective sample size increase = (1 / (1 - r_avg^2) - 1) * 100%
    effective N                    = N / (1 - r_avg^2)

The recruitment difference between two prognostic models is the plain
difference of their effective Ns. ``adjusted_treatment_effect`` runs the
matching ANCOVA (outcome ~ treatment + covariate) on patient-level data
and also reports the unadjusted two-sample estimate for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DegenerateInputError, UsageError


@dataclass(frozen=True)
class ArmCorrelations:
    """Outcome-covariate correlation per arm, each strictly below 1."""

    r_control: float
    r_treatment: float

    def __post_init__(self):
        for label, r in (("control", self.r_control), ("treatment", self.r_treatment)):
            if not 0.0 <= r < 1.0:
                raise UsageError(f"{label} correlation must be in [0, 1), got {r}")

    @classmethod
    def from_r_squared(cls, r2_control, r2_treatment):
        if not 0.0 <= r2_control < 1.0 or not 0.0 <= r2_treatment < 1.0:
            raise UsageError("squared correlations must be in [0, 1)")
        return cls(math.sqrt(r2_control), math.sqrt(r2_treatment))

    @property
    def r_avg(self):
        return 0.5 * (self.r_control + self.r_treatment)


def essi(correlations: ArmCorrelations) -> float:
    """Effective sample size increase, in percent."""
    r = correlations.r_avg
    return (1.0 / (1.0 - r * r) - 1.0) * 100.0


def effective_n(n: int, r_avg: float) -> float:
    """Patients an unadjusted analysis would need for the same precision."""
    if n < 1:
        raise UsageError("trial size must be at least 1")
    if not 0.0 <= r_avg < 1.0:
        raise UsageError(f"average correlation must be in [0, 1), got {r_avg}")
    return n / (1.0 - r_avg * r_avg)


def recruitment_diff(n: int, r_avg_1: float, r_avg_2: float) -> float:
    """Extra effective patients model 1 buys over model 2:
    N * [1 / (1 - r1^2) - 1 / (1 - r2^2)]."""
    if not r_avg_2 < r_avg_1 < 1.0:
        raise UsageError(
            f"expected r_avg_2 < r_avg_1 < 1, got {r_avg_2} and {r_avg_1}"
        )
    return effective_n(n, r_avg_1) - effective_n(n, r_avg_2)


@dataclass(frozen=True)
class TrialArm:
    """Per-patient observed outcomes and baseline covariates for one arm."""

    outcomes: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "outcomes", np.asarray(self.outcomes, dtype=np.float64))
        object.__setattr__(self, "covariates", np.asarray(self.covariates, dtype=np.float64))
        if self.outcomes.size != self.covariates.size or self.outcomes.size == 0:
            raise UsageError("arm needs matched, non-empty outcomes and covariates")

    @property
    def size(self):
        return self.outcomes.size


@dataclass
class EffectEstimate:
    estimate: float
    std_error: float
    ci_low: float
    ci_high: float


@dataclass
class AdjustedEffect:
    adjusted: EffectEstimate
    unadjusted: EffectEstimate
    method: str


def _two_sample(y_t, y_c, alpha):
    n_t, n_c = y_t.size, y_c.size
    diff = y_t.mean() - y_c.mean()
    dof = n_t + n_c - 2
    pooled = ((y_t - y_t.mean()) ** 2).sum() + ((y_c - y_c.mean()) ** 2).sum()
    se = math.sqrt(pooled / dof * (1.0 / n_t + 1.0 / n_c))
    q = stats.t.ppf(1.0 - alpha / 2.0, dof)
    return EffectEstimate(float(diff), float(se), float(diff - q * se), float(diff + q * se))


def adjusted_treatment_effect(control: TrialArm, treatment: TrialArm,
                              alpha=0.05, method="ancova") -> AdjustedEffect:
    """Treatment-effect estimate with covariate adjustment.

    ``method="ancova"`` regresses outcome on (intercept, treatment flag,
    covariate) and reports the treatment coefficient; ``"subtract"``
    subtracts the covariate from each outcome and runs the plain
    two-sample comparison. The unadjusted two-sample estimate is always
    included.
    """
    y = np.concatenate([control.outcomes, treatment.outcomes])
    x = np.concatenate([control.covariates, treatment.covariates])
    t = np.concatenate(
        [np.zeros(control.size), np.ones(treatment.size)]
    )
    if np.ptp(x) == 0:
        raise DegenerateInputError("constant covariate cannot adjust anything")

    unadjusted = _two_sample(treatment.outcomes, control.outcomes, alpha)

    if method == "subtract":
        adjusted = _two_sample(
            treatment.outcomes - treatment.covariates,
            control.outcomes - control.covariates,
            alpha,
        )
    elif method == "ancova":
        design = np.column_stack([np.ones_like(y), t, x])
        beta, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
        resid = y - design @ beta
        dof = y.size - design.shape[1]
        if dof <= 0:
            raise UsageError("not enough patients for ANCOVA degrees of freedom")
        sigma2 = float(resid @ resid) / dof
        cov = sigma2 * np.linalg.inv(design.T @ design)
        se = math.sqrt(cov[1, 1])
        q = stats.t.ppf(1.0 - alpha / 2.0, dof)
        est = float(beta[1])
        adjusted = EffectEstimate(est, se, est - q * se, est + q * se)
    else:
        raise UsageError(f"unknown adjustment method {method!r}")
    return AdjustedEffect(adjusted=adjusted, unadjusted=unadjusted, method=method)


@dataclass(frozen=True)
class SimulationConfig:
    """Monte-Carlo trial generator: outcome = r * covariate + effect * flag
    + sqrt(1 - r^2) * noise, so the planted outcome-covariate correlation
    is exactly r in both arms."""

    n_per_arm: int = 400
    correlation: float = 0.7
    true_effect: float = 0.5
    repetitions: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.correlation < 1.0:
            raise UsageError("planted correlation must be in [0, 1)")
        if self.n_per_arm < 4:
            raise UsageError("need at least 4 patients per arm")


def simulate_trials(cfg: SimulationConfig, method="ancova"):
    """Run repeated randomized trials; returns summary statistics.

    Per repetition the adjusted and unadjusted CI widths and estimates are
    recorded with an independent child seed, so repetitions could run in
    parallel and still aggregate deterministically.
    """
    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(cfg.repetitions)
    r = cfg.correlation
    noise_scale = math.sqrt(1.0 - r * r)
    est, width_adj, width_unadj, se_adj, se_unadj = [], [], [], [], []
    for child in children:
        rng = np.random.default_rng(child)
        x_c = rng.standard_normal(cfg.n_per_arm)
        x_t = rng.standard_normal(cfg.n_per_arm)
        y_c = r * x_c + noise_scale * rng.standard_normal(cfg.n_per_arm)
        y_t = (
            r * x_t
            + cfg.true_effect
            + noise_scale * rng.standard_normal(cfg.n_per_arm)
        )
        result = adjusted_treatment_effect(
            TrialArm(y_c, x_c), TrialArm(y_t, x_t), method=method
        )
        est.append(result.adjusted.estimate)
        width_adj.append(result.adjusted.ci_high - result.adjusted.ci_low)
        width_unadj.append(result.unadjusted.ci_high - result.unadjusted.ci_low)
        se_adj.append(result.adjusted.std_error)
        se_unadj.append(result.unadjusted.std_error)
    est = np.array(est)
    se_adj = np.array(se_adj)
    se_unadj = np.array(se_unadj)
    realized_essi = (np.mean(se_unadj**2) / np.mean(se_adj**2) - 1.0) * 100.0
    return {
        "mean_estimate": float(est.mean()),
        "mc_std_error": float(est.std(ddof=1) / math.sqrt(est.size)),
        "mean_ci_width_adjusted": float(np.mean(width_adj)),
        "mean_ci_width_unadjusted": float(np.mean(width_unadj)),
        "ci_width_ratio": float(np.mean(width_adj) / np.mean(width_unadj)),
        "realized_essi_percent": float(realized_essi),
        "formula_essi_percent": essi(ArmCorrelations(r, r)),
        "true_effect": cfg.true_effect,
        "repetitions": cfg.repetitions,
    }


def recruitment_table(n, model_arms: dict, digits=1):
    """ESSI / effective-N summary for one or more prognostic models.

    ``model_arms`` maps a model name to an ArmCorrelations. Patient counts
    are rounded only here, at display time.
    """
    rows = []
    for name, arms in model_arms.items():
        eff = effective_n(n, arms.r_avg)
        rows.append(
            {
                "model": name,
                "r_avg": round(arms.r_avg, 6),
                "essi_percent": round(essi(arms), digits),
                "effective_n": int(round(eff)),
                "gain_vs_unadjusted": int(round(eff - n)),
            }
        )
    rows.sort(key=lambda row: -row["effective_n"])
    pairwise = []
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            a, b = rows[i], rows[j]
            arms_a = model_arms[a["model"]]
            arms_b = model_arms[b["model"]]
            pairwise.append(
                {
                    "better": a["model"],
                    "worse": b["model"],
                    "extra_patients": int(
                        round(recruitment_diff(n, arms_a.r_avg, arms_b.r_avg))
                    ),
                }
            )
    return {"n": n, "models": rows, "pairwise": pairwise}
