"""The inferential stack: random-intercept mixed-effects residualization,
Spearman rank correlation, percentile bootstrap summaries, and the Wilcoxon
signed-rank test.

Conventions (also embedded in report metadata): the mixed model is fit by
maximum likelihood (not REML); residualization subtracts fixed effects only;
bootstrap resamples rows (not subjects) with per-replicate RNG streams
derived from (seed, replicate); method comparisons in correlation reports
pair bootstrap replicates via identical resample indices.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInputError, FitError, JoinError

ML_CRITERION = "maximum likelihood"
WILCOXON_EXACT_MAX_N = 25

STATS_CONVENTIONS = {
    "lmm_criterion": "ML",
    "residualization": "fixed effects only",
    "bootstrap_resampling": "rows",
    "method_comparison": "wilcoxon over paired bootstrap replicates",
}


# ---------------------------------------------------------------------------
# Tables


@dataclass(frozen=True)
class ObservationTable:
    """Longitudinal records (subject_id, visit, age, sex, y)."""

    subject_id: np.ndarray  # opaque string ids
    visit: np.ndarray  # ordinal ints
    age: np.ndarray  # years
    sex: np.ndarray  # 0/1
    y: np.ndarray  # target (HU or unitless)

    def __post_init__(self):
        sid = np.asarray(self.subject_id, dtype=object)
        visit = np.asarray(self.visit, dtype=np.int64)
        age = np.asarray(self.age, dtype=np.float64)
        sex = np.asarray(self.sex, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.float64)
        n = len(sid)
        if not (len(visit) == len(age) == len(sex) == len(y) == n):
            raise ValueError("columns have mismatched lengths")
        keys = list(zip(sid, visit))
        if len(set(keys)) != n:
            raise ValueError("(subject_id, visit) keys are not unique")
        if not np.isfinite(age).all():
            raise ValueError("age must be finite")
        if not np.isin(sex, (0, 1)).all():
            raise ValueError("sex must be coded 0/1")
        for name, arr in (("subject_id", sid), ("visit", visit), ("age", age), ("sex", sex), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.subject_id)

    def keys(self) -> list:
        return list(zip(self.subject_id, self.visit))

    @classmethod
    def from_csv(cls, path) -> "ObservationTable":
        cols = {k: [] for k in ("subject_id", "visit", "age", "sex", "y")}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(cols) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"observation CSV missing columns: {sorted(missing)}")
            for row in reader:
                cols["subject_id"].append(row["subject_id"])
                cols["visit"].append(int(row["visit"]))
                cols["age"].append(float(row["age"]))
                cols["sex"].append(int(row["sex"]))
                cols["y"].append(float(row["y"]))
        return cls(**{k: np.array(v, dtype=object if k == "subject_id" else None) for k, v in cols.items()})


def read_predictions_csv(path) -> dict:
    """Prediction CSV (subject_id, visit, method, y_pred) as
    {method: {(subject_id, visit): y_pred}}."""
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"subject_id", "visit", "method", "y_pred"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"prediction CSV missing columns: {sorted(missing)}")
        for row in reader:
            out.setdefault(row["method"], {})[(row["subject_id"], int(row["visit"]))] = float(
                row["y_pred"]
            )
    return out


# ---------------------------------------------------------------------------
# Random-intercept mixed model (Eq: y = b0 + b1*age + b2*sex + r_subject + eps)


@dataclass(frozen=True)
class LmmFit:
    beta0: float
    beta1: float
    beta2: float
    beta_se: tuple
    sigma_r2: float
    sigma_e2: float
    loglik: float
    theta: float  # variance ratio sigma_r2 / sigma_e2
    theta_identifiable: bool
    n_obs: int
    n_subjects: int

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.beta2])


def _design(table: ObservationTable):
    X = np.column_stack(
        [np.ones(len(table)), table.age, table.sex.astype(np.float64)]
    )
    _, codes = np.unique(table.subject_id.astype(str), return_inverse=True)
    counts = np.bincount(codes)
    return X, table.y.astype(np.float64), codes, counts


def _profile(X, y, codes, counts, theta):
    """GLS profile of the ML criterion at fixed variance ratio theta.

    With V = sigma_e^2 (I + theta Z Z^T) and a random intercept per subject,
    W = V^-1 sigma_e^2 is block diagonal with W_i = I - theta/(1+theta n_i) J,
    so all quadratic forms reduce to per-subject sums.
    """
    n, p = X.shape
    c = theta / (1.0 + theta * counts)  # per-subject shrinkage
    sx = np.zeros((len(counts), p))
    np.add.at(sx, codes, X)
    sy = np.bincount(codes, weights=y, minlength=len(counts))

    xtx = X.T @ X - (sx * c[:, None]).T @ sx
    xty = X.T @ y - sx.T @ (c * sy)
    yty = float(y @ y - c @ (sy * sy))

    beta = np.linalg.solve(xtx, xty)
    rss = yty - 2.0 * float(beta @ xty) + float(beta @ xtx @ beta)
    rss = max(rss, 0.0)
    sigma_e2 = rss / n
    logdet = float(np.log1p(theta * counts).sum())
    if sigma_e2 > 0:
        loglik = -0.5 * (n * (math.log(2 * math.pi) + math.log(sigma_e2) + 1.0) + logdet)
    else:
        loglik = math.inf  # exact interpolation
    return beta, sigma_e2, loglik, xtx


def fit_lmm(table: ObservationTable, theta=None) -> LmmFit:
    """ML fit of the random-intercept model via a 1D profiled likelihood over
    theta = sigma_r^2/sigma_e^2 in [0, 1e3] (coarse log-grid bracket, then
    golden-section to 1e-8 in log theta). Pass ``theta`` to fix the ratio
    (theta=0 gives ordinary least squares).
    """
    X, y, codes, counts = _design(table)
    if len(counts) < 3:
        raise FitError(f"need >= 3 subjects, got {len(counts)}")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise FitError("design matrix [1, age, sex] is rank deficient")

    identifiable = bool((counts > 1).any())
    if theta is not None:
        theta_hat = float(theta)
    elif not identifiable:
        theta_hat = 0.0  # single visit everywhere: ratio unidentifiable
    else:
        theta_hat = _maximize_theta(X, y, codes, counts)

    beta, sigma_e2, loglik, xtx = _profile(X, y, codes, counts, theta_hat)
    cov = sigma_e2 * np.linalg.inv(xtx)
    se = tuple(float(s) for s in np.sqrt(np.maximum(np.diag(cov), 0.0)))
    return LmmFit(
        beta0=float(beta[0]),
        beta1=float(beta[1]),
        beta2=float(beta[2]),
        beta_se=se,
        sigma_r2=theta_hat * sigma_e2,
        sigma_e2=sigma_e2,
        loglik=loglik,
        theta=theta_hat,
        theta_identifiable=identifiable,
        n_obs=len(table),
        n_subjects=len(counts),
    )


def _maximize_theta(X, y, codes, counts, lo=1e-10, hi=1e3, tol=1e-8):
    def nll(u):
        return -_profile(X, y, codes, counts, math.exp(u))[2]

    # coarse bracket over the log grid, boundary theta=0 included at the end
    grid = np.linspace(math.log(lo), math.log(hi), 33)
    vals = [nll(u) for u in grid]
    k = int(np.argmin(vals))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, len(grid) - 1)]

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = nll(c), nll(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = nll(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = nll(d)
    theta_hat = math.exp((a + b) / 2.0)
    if -_profile(X, y, codes, counts, 0.0)[2] <= min(fc, fd):
        return 0.0
    return theta_hat


def residualize(table: ObservationTable, fit: LmmFit) -> np.ndarray:
    """Per-row y - beta0 - beta1*age - beta2*sex (fixed effects only; the
    random intercept is deliberately not subtracted)."""
    return table.y - fit.beta0 - fit.beta1 * table.age - fit.beta2 * table.sex


# ---------------------------------------------------------------------------
# Rank statistics


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ValueError("spearman needs two equal-length 1D arrays, n >= 3")
    rx = rankdata(x)
    ry = rankdata(y)
    if rx.std() == 0.0 or ry.std() == 0.0:
        raise DegenerateInputError("zero rank variance")
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx @ ry) / math.sqrt((rx @ rx) * (ry @ ry)))


def wilcoxon_signed_rank(a, b) -> tuple:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; ties get average ranks. Exact p by
    sign-pattern dynamic programming for n <= 25, normal approximation with
    continuity (and tie) correction otherwise. Returns (W, p) where W is the
    positive-rank sum.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("wilcoxon needs two equal-length 1D arrays")
    d = a - b
    d = d[d != 0.0]
    if len(d) == 0:
        raise DegenerateInputError("all differences are zero")
    n = len(d)
    if n < 5:
        raise ValueError(f"need >= 5 nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_pos = float(ranks[d > 0].sum())

    if n <= WILCOXON_EXACT_MAX_N:
        p = _wilcoxon_exact_p(ranks, w_pos)
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        tie_term = float((tie_counts**3 - tie_counts).sum()) / 48.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
        dev = w_pos - mean
        z = (dev - 0.5 * np.sign(dev)) / math.sqrt(var) if dev != 0 else 0.0
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return w_pos, p


def _wilcoxon_exact_p(ranks, w_pos) -> float:
    """Exact two-sided p = P(|W - EW| >= |w - EW|) by DP over doubled ranks
    (average ranks become integers when doubled)."""
    d2 = np.rint(2.0 * ranks).astype(np.int64)
    total = int(d2.sum())  # = 2 * n(n+1)/2, always even
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in d2:
        counts[r:] += counts[: total + 1 - r]
    mean2 = total / 2.0
    dev = abs(2.0 * w_pos - mean2)
    sums = np.arange(total + 1, dtype=np.float64)
    hits = counts[np.abs(sums - mean2) >= dev - 1e-9].sum()
    return float(hits / 2.0 ** len(d2))


# ---------------------------------------------------------------------------
# Bootstrap


@dataclass(frozen=True)
class StatSummary:
    """Percentile-bootstrap summary: mean over replicates with the 2.5/97.5
    percentile interval."""

    mean: float
    ci_low: float
    ci_high: float
    n_boot: int
    seed: int

    def format(self, decimals: int = 2) -> str:
        return (
            f"{self.mean:.{decimals}f} "
            f"[{self.ci_low:.{decimals}f}, {self.ci_high:.{decimals}f}]"
        )


def bootstrap_indices(n: int, seed: int, replicate: int, attempt: int = 0) -> np.ndarray:
    """Resample indices for one replicate from an independent stream derived
    from (seed, replicate); results never depend on evaluation order."""
    ss = np.random.SeedSequence(seed, spawn_key=(replicate, attempt))
    return np.random.default_rng(ss).integers(0, n, size=n)


def bootstrap(data, statistic, n_boot: int = 1000, seed: int = 0) -> StatSummary:
    """Percentile bootstrap of ``statistic`` over row resamples of ``data``.

    Replicates where the statistic is undefined (DegenerateInputError) are
    redrawn, up to 10 attempts each (a 10 * n_boot total-attempt cap).
    """
    data = np.asarray(data)
    n = data.shape[0]
    if n < 2:
        raise ValueError(f"need >= 2 rows to bootstrap, got {n}")
    stats = np.empty(n_boot, dtype=np.float64)
    for r in range(n_boot):
        for attempt in range(10):
            idx = bootstrap_indices(n, seed, r, attempt)
            try:
                stats[r] = float(statistic(data[idx]))
                break
            except DegenerateInputError:
                continue
        else:
            raise DegenerateInputError(
                f"statistic undefined on 10 consecutive redraws of replicate {r}"
            )
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return StatSummary(
        mean=float(stats.mean()), ci_low=float(lo), ci_high=float(hi),
        n_boot=n_boot, seed=seed,
    )


def significance_stars(p: float) -> str:
    """Star rendering used in the correlation figures; '****' for p <= 1e-4."""
    for threshold, stars in ((1e-4, "****"), (1e-3, "***"), (1e-2, "**"), (5e-2, "*")):
        if p <= threshold:
            return stars
    return "ns"


# ---------------------------------------------------------------------------
# Correlation report


@dataclass(frozen=True)
class MethodCorrelation:
    method: str
    rho: StatSummary
    significant: bool  # 95% CI does not overlap 0


@dataclass(frozen=True)
class CorrelationReport:
    methods: list
    pairwise: dict  # (method_a, method_b) -> {"w": ..., "p": ..., "stars": ...}
    n_rows: int
    seed: int
    n_boot: int
    fit: LmmFit
    conventions: dict = field(default_factory=lambda: dict(STATS_CONVENTIONS))

    def to_json_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "seed": self.seed,
            "n_boot": self.n_boot,
            "model": {
                "beta": list(self.fit.beta),
                "sigma_r2": self.fit.sigma_r2,
                "sigma_e2": self.fit.sigma_e2,
                "loglik": self.fit.loglik,
                "criterion": ML_CRITERION,
            },
            "methods": {
                m.method: {
                    "rho_mean": m.rho.mean,
                    "ci": [m.rho.ci_low, m.rho.ci_high],
                    "cell": m.rho.format(),
                    "significant": m.significant,
                }
                for m in self.methods
            },
            "pairwise": [
                {"a": a, "b": b, "w": v["w"], "p": v["p"], "stars": v["stars"]}
                for (a, b), v in self.pairwise.items()
            ],
            "conventions": self.conventions,
        }


def correlation_report(
    predictions: dict,
    table: ObservationTable,
    seed: int = 0,
    n_boot: int = 1000,
) -> CorrelationReport:
    """Spearman correlation between per-method predictions and mixed-model
    residuals, with bootstrap summaries and pairwise Wilcoxon comparisons
    over paired replicates (identical resample indices across methods).
    """
    fit = fit_lmm(table)
    resid = residualize(table, fit)
    keys = table.keys()

    methods = sorted(predictions)
    aligned = {}
    for m in methods:
        missing = [k for k in keys if k not in predictions[m]]
        if missing:
            raise JoinError(
                f"method {m!r} is missing predictions for {len(missing)} keys: "
                f"{missing[:5]}{'...' if len(missing) > 5 else ''}",
                missing_keys=missing,
            )
        aligned[m] = np.array([predictions[m][k] for k in keys])

    n = len(table)
    replicates = {m: np.empty(n_boot) for m in methods}
    for r in range(n_boot):
        for attempt in range(10):
            idx = bootstrap_indices(n, seed, r, attempt)
            try:
                vals = {m: spearman(aligned[m][idx], resid[idx]) for m in methods}
                break
            except DegenerateInputError:
                continue
        else:
            raise DegenerateInputError(
                f"spearman undefined on 10 consecutive redraws of replicate {r}"
            )
        for m in methods:
            replicates[m][r] = vals[m]

    summaries = []
    for m in methods:
        lo, hi = np.percentile(replicates[m], [2.5, 97.5])
        s = StatSummary(
            mean=float(replicates[m].mean()), ci_low=float(lo), ci_high=float(hi),
            n_boot=n_boot, seed=seed,
        )
        summaries.append(
            MethodCorrelation(method=m, rho=s, significant=bool(lo > 0 or hi < 0))
        )

    pairwise = {}
    for i, ma in enumerate(methods):
        for mb in methods[i + 1 :]:
            try:
                w, p = wilcoxon_signed_rank(replicates[ma], replicates[mb])
            except DegenerateInputError:
                w, p = 0.0, 1.0  # identical replicate streams
            pairwise[(ma, mb)] = {"w": w, "p": p, "stars": significance_stars(p)}

    return CorrelationReport(
        methods=summaries, pairwise=pairwise, n_rows=n, seed=seed, n_boot=n_boot, fit=fit
    )
