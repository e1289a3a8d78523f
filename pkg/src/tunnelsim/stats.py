"""Group comparison: detrending regression, outlier clamping, TOST
equivalence, difference and learning-rate tests."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .metrics import GAZE_PARAMETERS, PERFORMANCE_PARAMETERS

log = logging.getLogger(__name__)

REPORT_SCHEMA = "tunnelsim.equivalence-report"
REPORT_VERSION = 1


class RankError(ValueError):
    """Design matrix is rank deficient."""

    def __init__(self, columns):
        self.columns = tuple(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


class DegenerateError(ValueError):
    """Input has no variation to test."""


# -- t distribution -------------------------------------------------------

def _betacf(a: float, b: float, x: float, eps: float = 1e-15, max_iter: int = 10000) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta function I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t with ``df`` degrees of freedom."""
    if not df > 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    x = df / (df + t * t)
    tail = 0.5 * betainc(df / 2.0, 0.5, x)
    return tail if t > 0 else 1.0 - tail


def t_cdf(t: float, df: float) -> float:
    return t_sf(-t, df)


def two_sided_p(t: float, df: float) -> float:
    return min(1.0, 2.0 * t_sf(abs(t), df))


# -- descriptive helpers --------------------------------------------------

def clamp_outliers(values, k: float = 3.0) -> np.ndarray:
    """Limit values to mean +/- k sample standard deviations of the input."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two values")
    mu = float(x.mean())
    sd = float(x.std(ddof=1))
    if sd == 0:
        return x.copy()
    return np.clip(x, mu - k * sd, mu + k * sd)


def skewness(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = x.std()
    return float(((x - x.mean()) ** 3).mean() / sd ** 3) if sd > 0 else math.nan


def excess_kurtosis(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = x.std()
    return float(((x - x.mean()) ** 4).mean() / sd ** 4 - 3.0) if sd > 0 else math.nan


# -- regression -----------------------------------------------------------

@dataclass(frozen=True)
class LinearFit:
    names: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    residuals: np.ndarray
    df: int

    def coefficient(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])

    def t_value(self, name: str) -> float:
        i = self.names.index(name)
        return float(self.coef[i] / self.se[i]) if self.se[i] > 0 else math.copysign(math.inf, self.coef[i]) if self.coef[i] else 0.0

    def p_value(self, name: str) -> float:
        if self.df <= 0:
            return math.nan
        i = self.names.index(name)
        if self.se[i] == 0:
            return 0.0 if self.coef[i] != 0 else 1.0
        return two_sided_p(float(self.coef[i] / self.se[i]), self.df)


def _collinear(X: np.ndarray, names: Sequence[str]) -> list[str]:
    bad = []
    kept = []
    for j in range(X.shape[1]):
        trial = kept + [j]
        if np.linalg.matrix_rank(X[:, trial]) < len(trial):
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def fit_linear(y, design, names: Optional[Sequence[str]] = None) -> LinearFit:
    """Ordinary least squares with standard errors.

    ``design`` is an (n, p) array or a mapping of column name to values.
    Raises :class:`RankError` naming the columns that add no rank.
    """
    if isinstance(design, dict):
        names = tuple(design)
        X = np.column_stack([np.asarray(design[k], dtype=float) for k in names])
    else:
        X = np.asarray(design, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError(f"y has shape {y.shape}, expected ({n},)")
    if np.linalg.matrix_rank(X) < p:
        raise RankError(_collinear(X, names))
    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    df = n - p
    if df > 0:
        s2 = float(resid @ resid) / df
        cov = s2 * np.linalg.inv(X.T @ X)
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    else:
        se = np.full(p, math.nan)
    return LinearFit(names, coef, se, resid, df)


# -- tests ----------------------------------------------------------------

@dataclass(frozen=True)
class TostConfig:
    delta_factor: float = 0.2
    alpha: float = 0.05

    def __post_init__(self):
        if not self.delta_factor > 0:
            raise ValueError("delta_factor must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class TostResult:
    p: float
    p_lower: float
    p_upper: float
    delta: float
    sd_pooled: float
    diff: float
    se: float
    df: float
    equivalent: bool


def pooled_sd(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = len(a), len(b)
    return math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))


def welch(a, b) -> tuple[float, float, float]:
    """Mean difference a - b, its Welch standard error and degrees of freedom."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se = math.sqrt(va + vb)
    if se == 0:
        return float(a.mean() - b.mean()), 0.0, math.inf
    df = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    return float(a.mean() - b.mean()), se, df


def welch_test(a, b) -> float:
    """Two-sided Welch t-test p-value."""
    if len(a) < 2 or len(b) < 2:
        return math.nan
    diff, se, df = welch(a, b)
    if se == 0:
        return 1.0 if diff == 0 else 0.0
    return two_sided_p(diff / se, df)


def tost(a, b, cfg: TostConfig = TostConfig()) -> TostResult:
    """Two one-sided Welch tests of |mean(a) - mean(b)| < delta.

    ``delta`` is ``delta_factor`` times the pooled standard deviation; the
    equivalence p-value is the larger of the two one-sided p-values. With
    zero pooled spread, equivalence holds exactly when the means coincide.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least two values")
    sd = pooled_sd(a, b)
    delta = cfg.delta_factor * sd
    diff, se, df = welch(a, b)
    if sd == 0 or se == 0:
        same = diff == 0
        p = 0.0 if same else 1.0
        return TostResult(p, p, p, delta, sd, diff, se, float(df), bool(same))
    p_lower = t_cdf((diff - delta) / se, df)   # H0: diff >= delta
    p_upper = t_sf((diff + delta) / se, df)    # H0: diff <= -delta
    p = float(max(p_lower, p_upper))
    return TostResult(p, float(p_lower), float(p_upper), delta, sd, diff, se, float(df), bool(p < cfg.alpha))


# -- group comparison -----------------------------------------------------

@dataclass
class Observations:
    """Long-format table of one parameter."""

    group: np.ndarray
    participant: np.ndarray
    session: np.ndarray
    trial: np.ndarray
    value: np.ndarray
    covariate: Optional[np.ndarray] = None

    @classmethod
    def from_rows(cls, rows: Iterable[dict], parameter: str, covariate: Optional[str] = None) -> "Observations":
        g, p, s, t, v, c = [], [], [], [], [], []
        for r in rows:
            val = r[parameter]
            if val is None or not math.isfinite(val):
                continue
            g.append(r["group"])
            p.append(r["participant"])
            s.append(r["session"])
            t.append(r["trial"])
            v.append(val)
            if covariate:
                c.append(r[covariate])
        return cls(np.array(g, dtype=object), np.array(p, dtype=object), np.asarray(s, dtype=float),
                   np.asarray(t, dtype=float), np.asarray(v, dtype=float),
                   np.asarray(c, dtype=float) if covariate else None)

    def __len__(self):
        return len(self.value)

    def subset(self, mask) -> "Observations":
        return Observations(self.group[mask], self.participant[mask], self.session[mask], self.trial[mask],
                            self.value[mask], None if self.covariate is None else self.covariate[mask])


@dataclass(frozen=True)
class GroupDifference:
    p_difference: float
    p_learning_rate: float
    group_coef: float
    interaction_coef: float
    p_difference_two_stage: float
    p_learning_rate_two_stage: float
    intercepts: dict
    slopes: dict
    dropped: tuple[str, ...]


def group_difference(obs: Observations, group_a: str, group_b: str, per_participant_means: bool = False) -> GroupDifference:
    """Fixed-effect regression with a session x group interaction, plus a
    two-stage per-participant summary compared with Welch tests.

    Model: value ~ 1 + trial + session + group + session:group, with trial
    and session centred; group is 1 for ``group_b``. With
    ``per_participant_means`` the two-stage path compares participant means
    (intercepts) only and reports no slope test.
    """
    if len(obs) == 0 or not ({group_a, group_b} <= set(obs.group.tolist())):
        raise ValueError("both groups need observations")
    if np.ptp(obs.value) == 0:
        raise DegenerateError("all values are identical")
    sc = obs.session - obs.session.mean()
    tc = obs.trial - obs.trial.mean()
    gb = (obs.group == group_b).astype(float)
    fit = fit_linear(obs.value, {"intercept": np.ones(len(obs)), "trial": tc, "session": sc,
                                 "group": gb, "session:group": sc * gb})
    intercepts: dict = {group_a: [], group_b: []}
    slopes: dict = {group_a: [], group_b: []}
    dropped = []
    for pid in sorted(set(obs.participant.tolist())):
        m = obs.participant == pid
        grp = obs.group[m][0]
        if m.sum() < 3:
            log.warning("participant %s has fewer than 3 observations; dropped from the two-stage test", pid)
            dropped.append(pid)
            continue
        if per_participant_means:
            intercepts[grp].append(float(obs.value[m].mean()))
            continue
        s = obs.session[m]
        if np.ptp(s) == 0:
            intercepts[grp].append(float(obs.value[m].mean()))
            continue
        pf = fit_linear(obs.value[m], {"intercept": np.ones(int(m.sum())), "session": s - obs.session.mean()})
        intercepts[grp].append(pf.coefficient("intercept"))
        slopes[grp].append(pf.coefficient("session"))
    p_diff_2s = welch_test(intercepts[group_a], intercepts[group_b])
    p_lr_2s = math.nan if per_participant_means else welch_test(slopes[group_a], slopes[group_b])
    return GroupDifference(
        fit.p_value("group"), fit.p_value("session:group"),
        fit.coefficient("group"), fit.coefficient("session:group"),
        p_diff_2s, p_lr_2s,
        {k: float(np.mean(v)) if v else math.nan for k, v in intercepts.items()},
        {k: float(np.mean(v)) if v else math.nan for k, v in slopes.items()},
        tuple(dropped),
    )


def detrend(obs: Observations) -> np.ndarray:
    """Residuals of value ~ 1 + session + trial over all observations."""
    return fit_linear(obs.value, {"intercept": np.ones(len(obs)), "session": obs.session, "trial": obs.trial}).residuals


def covariate_effect(obs: Observations) -> tuple[float, float]:
    """p-values of a continuous covariate and its session interaction."""
    sc = obs.session - obs.session.mean()
    tc = obs.trial - obs.trial.mean()
    cc = obs.covariate - obs.covariate.mean()
    fit = fit_linear(obs.value, {"intercept": np.ones(len(obs)), "trial": tc, "session": sc,
                                 "covariate": cc, "session:covariate": sc * cc})
    return fit.p_value("covariate"), fit.p_value("session:covariate")


COUNT_PARAMETERS = ("collisions",)
DEFAULT_PARAMETERS = GAZE_PARAMETERS + ("score", "p_adj", "log_duration", "collisions")


def compare_parameter(obs: Observations, group_a: str, group_b: str, parameter: str,
                      cfg: TostConfig = TostConfig(), mode: str = "trial") -> dict:
    """Equivalence, difference and learning-rate results for one parameter."""
    if mode not in ("trial", "participant"):
        raise ValueError(f"unknown TOST mode {mode!r}")
    notes = []
    # clamp outliers within each group
    value = obs.value.copy()
    for g in (group_a, group_b):
        m = obs.group == g
        if m.sum() >= 2:
            value[m] = clamp_outliers(value[m])
    obs = Observations(obs.group, obs.participant, obs.session, obs.trial, value, obs.covariate)
    out = {
        "n_a": int((obs.group == group_a).sum()),
        "n_b": int((obs.group == group_b).sum()),
        "participants_a": len(set(obs.participant[obs.group == group_a].tolist())),
        "participants_b": len(set(obs.participant[obs.group == group_b].tolist())),
        "mean_a": float(value[obs.group == group_a].mean()) if (obs.group == group_a).any() else None,
        "mean_b": float(value[obs.group == group_b].mean()) if (obs.group == group_b).any() else None,
    }
    if out["n_a"] < 2 or out["n_b"] < 2 or np.ptp(value) == 0:
        notes.append("insufficient or constant data")
        out.update({"p_equivalence": None, "equivalent": None, "p_difference": None, "p_learning_rate": None,
                    "notes": notes})
        return out
    resid = detrend(obs)
    if mode == "trial":
        ra, rb = resid[obs.group == group_a], resid[obs.group == group_b]
    else:
        ra = [float(resid[obs.participant == p].mean()) for p in sorted(set(obs.participant[obs.group == group_a].tolist()))]
        rb = [float(resid[obs.participant == p].mean()) for p in sorted(set(obs.participant[obs.group == group_b].tolist()))]
    if len(ra) >= 2 and len(rb) >= 2:
        tr = tost(ra, rb, cfg)
        out.update({"p_equivalence": tr.p, "equivalent": tr.equivalent, "delta": tr.delta, "sd_pooled": tr.sd_pooled,
                    "mean_difference": tr.diff})
    else:
        out.update({"p_equivalence": None, "equivalent": None})
        notes.append("too few units for TOST")
    counts = parameter in COUNT_PARAMETERS
    gd = group_difference(obs, group_a, group_b, per_participant_means=counts)
    if counts:
        zero = float((value == 0).mean())
        notes.append(f"count outcome compared on per-participant means; zero fraction {zero:.3f}")
        out["zero_fraction"] = zero
        out["p_difference"] = gd.p_difference_two_stage
        out["p_learning_rate"] = gd.p_learning_rate
    else:
        out["p_difference"] = gd.p_difference
        out["p_learning_rate"] = gd.p_learning_rate
    out["p_difference_fixed"] = gd.p_difference
    out["p_learning_rate_fixed"] = gd.p_learning_rate
    out["p_difference_two_stage"] = gd.p_difference_two_stage
    out["p_learning_rate_two_stage"] = gd.p_learning_rate_two_stage
    out["slope_a"] = gd.slopes[group_a]
    out["slope_b"] = gd.slopes[group_b]
    if gd.dropped:
        notes.append(f"dropped from two-stage test: {', '.join(gd.dropped)}")
    if obs.covariate is not None and np.ptp(obs.covariate) > 0:
        try:
            p_vf, p_vf_lr = covariate_effect(obs)
            out["p_vf_size"] = p_vf
            out["p_vf_size_session"] = p_vf_lr
        except RankError as exc:
            notes.append(str(exc))
    out["residual_skewness"] = skewness(resid)
    out["residual_excess_kurtosis"] = excess_kurtosis(resid)
    out["notes"] = notes
    return out


def compare(rows: Sequence[dict], parameters: Sequence[str], group_a: str, group_b: str,
            cfg: TostConfig = TostConfig(), mode: str = "trial") -> dict:
    """Full report over the (task, parameter) pairs present in the rows.

    Gaze parameters use only analysed trials (not excluded, not missing);
    performance parameters use every trial.
    """
    groups = sorted(set(r["group"] for r in rows))
    for g in (group_a, group_b):
        if g not in groups:
            raise ValueError(f"group {g!r} has no rows (groups present: {groups})")
    unknown = [p for p in parameters if p not in GAZE_PARAMETERS + PERFORMANCE_PARAMETERS]
    if unknown:
        raise ValueError(f"unknown parameters {unknown}")
    tasks = sorted(set(r["task"] for r in rows))
    results = {}
    for task in tasks:
        task_rows = [r for r in rows if r["task"] == task]
        analysed = [r for r in task_rows if not r["excluded"] and not r["missing"]]
        for p in parameters:
            source = analysed if p in GAZE_PARAMETERS else task_rows
            if not source:
                continue
            obs = Observations.from_rows(source, p, covariate="vf_radius" if "vf_radius" in source[0] else None)
            if len(obs) == 0:
                continue
            try:
                results[f"{task}.{p}"] = compare_parameter(obs, group_a, group_b, p, cfg, mode)
            except (ValueError, RankError) as exc:
                results[f"{task}.{p}"] = {"p_equivalence": None, "p_difference": None, "p_learning_rate": None,
                                          "notes": [str(exc)]}
    return _plain({
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "groups": {"a": group_a, "b": group_b},
        "tost": {"delta_factor": cfg.delta_factor, "alpha": cfg.alpha, "mode": mode, "sd": "pooled"},
        "parameters": results,
    })


def _plain(obj):
    """Builtin types only; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


class ReportError(ValueError):
    pass


def render_report(report: dict) -> str:
    """Plain-text table of equivalence, difference and learning-rate p-values."""
    if not isinstance(report, dict) or report.get("schema") != REPORT_SCHEMA:
        raise ReportError("not an equivalence report")
    if report.get("version") != REPORT_VERSION:
        raise ReportError(f"unsupported report version {report.get('version')!r} (expected {REPORT_VERSION})")
    groups = report.get("groups") or {}
    if not groups.get("a") or not groups.get("b"):
        raise ReportError("report does not name both groups")
    params = report.get("parameters")
    if not isinstance(params, dict):
        raise ReportError("report has no parameter table")

    def fmt(p):
        if p is None or (isinstance(p, float) and math.isnan(p)):
            return "-"
        return f"{p:.4f}" if p >= 1e-4 else f"{p:.1e}"

    alpha = report.get("tost", {}).get("alpha", 0.05)
    head = f"{'parameter':<28} {'Eq p':>9} {'Dif p':>9} {'LR p':>9}  finding"
    lines = [f"groups: {groups['a']} vs {groups['b']}  (alpha {alpha})", head, "-" * len(head)]
    for name in sorted(params):
        r = params[name]
        pe, pd, pl = r.get("p_equivalence"), r.get("p_difference"), r.get("p_learning_rate")
        finding = []
        if pe is not None and pe < alpha:
            finding.append("equivalent")
        if pd is not None and pd < alpha:
            finding.append("differs")
        if pl is not None and pl < alpha:
            finding.append("learning rates differ")
        lines.append(f"{name:<28} {fmt(pe):>9} {fmt(pd):>9} {fmt(pl):>9}  {', '.join(finding) or '-'}")
    return "\n".join(lines) + "\n"
