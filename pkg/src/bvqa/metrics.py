"""Correlation metrics, the 4-parameter logistic mapping, calibration.

Rank metrics are exact: srocc is the Pearson correlation of average
(fractional) ranks and krcc is tie-corrected Kendall tau-b computed with a
mergesort inversion count, so both agree bit-for-bit with brute-force pair
counting. Accuracy metrics (plcc, rmse) are computed after mapping raw
predictions through a fitted 4-parameter logistic

    L(x) = beta + (alpha - beta) / (1 + exp(-(x - gamma) / |delta|))

fit by damped Gauss-Newton from the canonical data-driven start plus four
seeded jittered restarts; the best residual wins. The fitted curve is
constrained non-decreasing (alpha >= beta), so an anti-correlated predictor
stays anti-correlated after mapping instead of being silently rescued.

calibrate_inlsa carries per-corpus affine alignments onto a common
subjective scale so scores from differently-scaled studies can be pooled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateInputError, ShapeError

Array = np.ndarray

KNOWN_CALIBRATION_TAGS = ("konvid-1k", "live-vqc", "youtube-ugc")


def _pair(a, b, name: str) -> tuple[Array, Array]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"{name}: expected 1-D vectors")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"{name}: length mismatch {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise DegenerateInputError(f"{name}: need at least 2 points")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DataError(f"{name}: non-finite input")
    return a, b


def _pearson(a: Array, b: Array, name: str) -> float:
    ac = a - a.mean()
    bc = b - b.mean()
    va = float(ac @ ac)
    vb = float(bc @ bc)
    if va <= 0.0 or vb <= 0.0:
        raise DegenerateInputError(f"{name}: zero variance input, correlation undefined")
    return float((ac @ bc) / math.sqrt(va * vb))


def average_ranks(x) -> Array:
    """Fractional ranks 1..n with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(n, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srocc(a, b) -> float:
    """Spearman rank-order correlation via Pearson on average ranks."""
    a, b = _pair(a, b, "srocc")
    return _pearson(average_ranks(a), average_ranks(b), "srocc")


def _count_inversions(values: list) -> int:
    """Pairs (i < j) with values[i] > values[j], strict, by mergesort."""
    arr = list(values)
    n = len(arr)
    buf = [0.0] * n
    inv = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            if mid >= hi:
                continue
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if arr[j] < arr[i]:
                    inv += mid - i
                    buf[k] = arr[j]
                    j += 1
                else:
                    buf[k] = arr[i]
                    i += 1
                k += 1
            while i < mid:
                buf[k] = arr[i]
                i += 1
                k += 1
            while j < hi:
                buf[k] = arr[j]
                j += 1
                k += 1
            arr[lo:hi] = buf[lo:hi]
        width *= 2
    return inv


def _tie_pairs(sorted_vals) -> int:
    total = 0
    run = 1
    for k in range(1, len(sorted_vals)):
        if sorted_vals[k] == sorted_vals[k - 1]:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    total += run * (run - 1) // 2
    return total


def krcc(a, b) -> float:
    """Kendall tau-b with full tie correction.

    tau-b = (C - D) / sqrt((n0 - n1)(n0 - n2)) where n0 is the pair count,
    n1/n2 the tied-pair counts in each argument. C - D is recovered from a
    mergesort inversion count over b after sorting by (a, b), which never
    enumerates pairs; all counts are exact integers.
    """
    a, b = _pair(a, b, "krcc")
    n = a.shape[0]
    n0 = n * (n - 1) // 2
    order = np.lexsort((b, a))
    sa = a[order]
    sb = b[order]
    n1 = _tie_pairs(sa.tolist())
    n2 = _tie_pairs(np.sort(b, kind="mergesort").tolist())
    n3 = _tie_pairs(list(zip(sa.tolist(), sb.tolist())))
    discordant = _count_inversions(sb.tolist())
    num = n0 - n1 - n2 + n3 - 2 * discordant  # = concordant - discordant
    den_sq = (n0 - n1) * (n0 - n2)
    if den_sq <= 0:
        raise DegenerateInputError("krcc: all pairs tied in one argument")
    return num / math.sqrt(den_sq)


# ---------------------------------------------------------------------------
# 4-parameter logistic


@dataclass
class Logistic4Params:
    """Fitted monotone logistic; delta is stored positive.

    `form` selects the exponent convention used by __call__: "standard" is
    exp(-(x - gamma)/delta); "legacy" is the collapsed-constant variant
    exp(-x + gamma/delta) kept for auditing older reports.
    """

    alpha: float
    beta: float
    gamma: float
    delta: float
    converged: bool = True
    degenerate: bool = False
    residual: float = 0.0
    form: str = "standard"

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.form == "legacy":
            u = x - self.gamma / self.delta
        else:
            u = (x - self.gamma) / self.delta
        return self.beta + (self.alpha - self.beta) * _sigmoid(u)


def _sigmoid(u: Array) -> Array:
    # split by sign so neither exp() overflows
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


_SPAN_FLOOR = 1e-12
_DELTA_FLOOR = 1e-9


def _project(theta: Array) -> Array:
    alpha, beta, gamma, delta = theta
    if alpha - beta < _SPAN_FLOOR:
        mid = 0.5 * (alpha + beta)
        alpha = mid + 0.5 * _SPAN_FLOOR
        beta = mid - 0.5 * _SPAN_FLOOR
    if delta < _DELTA_FLOOR:
        delta = _DELTA_FLOOR
    return np.array([alpha, beta, gamma, delta])


def _model_standard(theta: Array, x: Array) -> tuple[Array, Array]:
    alpha, beta, gamma, delta = theta
    u = (x - gamma) / delta
    s = _sigmoid(u)
    fitted = beta + (alpha - beta) * s
    ds = (alpha - beta) * s * (1.0 - s)
    J = np.column_stack([s, 1.0 - s, -ds / delta, -ds * u / delta])
    return fitted, J


def _model_legacy(theta: Array, x: Array) -> tuple[Array, Array]:
    alpha, beta, gamma, delta = theta
    u = x - gamma / delta
    s = _sigmoid(u)
    fitted = beta + (alpha - beta) * s
    ds = (alpha - beta) * s * (1.0 - s)
    J = np.column_stack([s, 1.0 - s, -ds / delta, ds * gamma / (delta * delta)])
    return fitted, J


def _levenberg_marquardt(model, theta0: Array, x: Array, y: Array,
                         max_iter: int = 200) -> tuple[Array, float, bool]:
    theta = _project(theta0)
    fitted, J = model(theta, x)
    r = y - fitted
    sse = float(r @ r)
    lam = 1e-3
    converged = False
    eye = np.eye(theta.shape[0])
    for _ in range(max_iter):
        A = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(60):
            try:
                step = np.linalg.solve(A + lam * eye, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = _project(theta + step)
            cf, cJ = model(cand, x)
            cr = y - cf
            csse = float(cr @ cr)
            if csse < sse:
                rel_gain = (sse - csse) / max(sse, 1e-300)
                theta, fitted, J, r, sse = cand, cf, cJ, cr, csse
                lam = max(lam * 0.3, 1e-12)
                improved = True
                if rel_gain < 1e-14:
                    converged = True
                break
            lam *= 10.0
            if lam > 1e14:
                break
        if not improved or converged:
            converged = True
            break
    return theta, sse, converged


def fit_logistic4(pred, mos, legacy_exponent: bool = False) -> Logistic4Params:
    """Fit the monotone 4-parameter logistic mapping pred -> mos.

    Damped Gauss-Newton from the canonical start (alpha=max(mos),
    beta=min(mos), gamma=mean(pred), delta=std(pred)) plus four seeded
    jittered restarts; the lowest residual wins. Deterministic given the
    inputs. Predictions are standardized internally (and the curve mapped
    back), which makes the result invariant under increasing affine
    rescaling of pred. Needs at least 5 points.
    """
    x, y = _pair(pred, mos, "fit_logistic4")
    n = x.shape[0]
    if n < 5:
        raise DegenerateInputError("fit_logistic4: need at least 5 points")
    form = "legacy" if legacy_exponent else "standard"

    y_span = float(y.max() - y.min())
    if y_span == 0.0:
        # all targets equal: the flat curve is exact, nothing to optimize
        c = float(y[0])
        sd = float(x.std()) or 1.0
        return Logistic4Params(alpha=c, beta=c, gamma=float(x.mean()), delta=sd,
                               converged=True, degenerate=True, residual=0.0,
                               form=form)
    x_sd = float(x.std())
    if x_sd == 0.0:
        mid = 0.5 * (float(y.max()) + float(y.min()))
        resid = math.sqrt(float(np.mean((y - mid) ** 2)))
        return Logistic4Params(alpha=float(y.max()), beta=float(y.min()),
                               gamma=float(x[0]), delta=1.0, converged=True,
                               degenerate=True, residual=resid, form=form)

    if legacy_exponent:
        model, z, scale_back = _model_legacy, x, None
    else:
        # standardize the abscissa for conditioning and affine invariance
        x_mu = float(x.mean())
        z = (x - x_mu) / x_sd
        model = _model_standard
        scale_back = (x_mu, x_sd)

    alpha0, beta0 = float(y.max()), float(y.min())
    gamma0, delta0 = float(z.mean()), float(z.std())
    starts = [np.array([alpha0, beta0, gamma0, delta0])]
    rng = np.random.default_rng(1729)
    for _ in range(4):
        jit = rng.standard_normal(4)
        starts.append(np.array([
            alpha0 + 0.25 * y_span * abs(jit[0]),
            beta0 - 0.25 * y_span * abs(jit[1]),
            gamma0 + 0.5 * delta0 * jit[2],
            delta0 * math.exp(0.5 * jit[3]),
        ]))

    best = None
    for theta0 in starts:
        theta, sse, converged = _levenberg_marquardt(model, theta0, z, y)
        if best is None or sse < best[1]:
            best = (theta, sse, converged)
    theta, sse, converged = best
    alpha, beta, gamma, delta = (float(v) for v in theta)
    if scale_back is not None:
        x_mu, x_sd = scale_back
        gamma = x_mu + x_sd * gamma
        delta = x_sd * delta
    return Logistic4Params(alpha=alpha, beta=beta, gamma=gamma, delta=abs(delta),
                           converged=converged, degenerate=False,
                           residual=math.sqrt(sse / n), form=form)


def fitted_predictions(pred, mos) -> tuple[Array, Logistic4Params | None, str]:
    """Map pred through the fitted logistic; fall back to raw when n < 5."""
    x, y = _pair(pred, mos, "fitted_predictions")
    if x.shape[0] < 5:
        return x, None, "unfitted: fewer than 5 points"
    fit = fit_logistic4(x, y)
    note = "degenerate fit" if fit.degenerate else ""
    return fit(x), fit, note


def plcc(pred, mos) -> float:
    """Pearson correlation between logistic-fitted predictions and mos."""
    fitted, _, _ = fitted_predictions(pred, mos)
    return _pearson(fitted, np.asarray(mos, dtype=np.float64), "plcc")


def rmse(pred, mos) -> float:
    """Root-mean-square error between logistic-fitted predictions and mos."""
    fitted, _, _ = fitted_predictions(pred, mos)
    y = np.asarray(mos, dtype=np.float64)
    return float(math.sqrt(float(np.mean((fitted - y) ** 2))))


# ---------------------------------------------------------------------------
# cross-corpus calibration


def calibrate_inlsa(q, source: str):
    """Map a subjective score onto the common anchor scale.

    Per-corpus affine alignments (anchor corpus maps to itself):
      konvid-1k   [1,5]   -> 5 - 4*((5 - q)/4 * 1.1241 - 0.0993)
      live-vqc    [0,100] -> 5 - 4*((100 - q)/100 * 0.7132 + 0.0253)
      youtube-ugc [1,5]   -> q
    Accepts scalars or arrays; unknown tags are a data error.
    """
    tag = source.strip().lower()
    arr = np.asarray(q, dtype=np.float64)
    if tag == "konvid-1k":
        out = 5.0 - 4.0 * ((5.0 - arr) / 4.0 * 1.1241 - 0.0993)
    elif tag == "live-vqc":
        out = 5.0 - 4.0 * ((100.0 - arr) / 100.0 * 0.7132 + 0.0253)
    elif tag == "youtube-ugc":
        out = arr
    else:
        raise DataError(f"calibrate_inlsa: unknown source tag {source!r} "
                        f"(known: {', '.join(KNOWN_CALIBRATION_TAGS)})")
    if np.isscalar(q) or np.ndim(q) == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# fold report


_METRIC_COLUMNS = ("srocc", "plcc", "krcc", "rmse")


@dataclass
class EvalReport:
    folds: list[dict]
    medians: dict
    meta: dict = field(default_factory=dict)

    def to_json_text(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v

        doc = {
            "folds": [{k: clean(v) for k, v in row.items()} for row in self.folds],
            "medians": {k: clean(v) for k, v in self.medians.items()},
            "meta": self.meta,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def to_csv_text(self) -> str:
        lines = ["fold,n," + ",".join(_METRIC_COLUMNS) + ",note"]
        for row in self.folds:
            cells = [str(row["fold"]), str(row["n"])]
            cells += [_csv_num(row[m]) for m in _METRIC_COLUMNS]
            cells.append(str(row.get("note", "")).replace(",", ";"))
            lines.append(",".join(cells))
        total_n = sum(row["n"] for row in self.folds)
        cells = ["median", str(total_n)]
        cells += [_csv_num(self.medians[m]) for m in _METRIC_COLUMNS]
        cells.append("")
        lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def _csv_num(v: float) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return repr(float(v))


def _median(values: list[float]) -> float:
    # even count: mean of the central pair
    return float(np.median(np.asarray(values, dtype=np.float64)))


def eval_report(fold_pairs, meta: dict | None = None) -> EvalReport:
    """Per-fold srocc/plcc/krcc/rmse plus medians across folds.

    fold_pairs is a sequence of (predictions, mos) pairs. A fold whose
    metrics are undefined (e.g. constant predictions) is recorded with NaN
    values and a note carrying the fold index and reason; medians are taken
    over the remaining folds. All folds degenerate is an error.
    """
    fold_pairs = list(fold_pairs)
    if not fold_pairs:
        raise DataError("eval_report: no folds")
    rows = []
    for idx, (pred, mos) in enumerate(fold_pairs):
        pred = np.asarray(pred, dtype=np.float64)
        mos = np.asarray(mos, dtype=np.float64)
        row = {"fold": idx, "n": int(pred.shape[0])}
        try:
            fitted, _, fit_note = fitted_predictions(pred, mos)
            row["srocc"] = srocc(pred, mos)
            row["krcc"] = krcc(pred, mos)
            row["plcc"] = _pearson(fitted, mos, "plcc")
            row["rmse"] = float(math.sqrt(float(np.mean((fitted - mos) ** 2))))
            row["note"] = fit_note
        except DegenerateInputError as exc:
            for m in _METRIC_COLUMNS:
                row[m] = float("nan")
            row["note"] = f"fold {idx} degenerate: {exc}"
        rows.append(row)

    medians = {}
    for m in _METRIC_COLUMNS:
        valid = [row[m] for row in rows if math.isfinite(row[m])]
        if not valid:
            raise DegenerateInputError(f"eval_report: metric {m} undefined in every fold")
        medians[m] = _median(valid)
    return EvalReport(folds=rows, medians=medians, meta=meta or {})
