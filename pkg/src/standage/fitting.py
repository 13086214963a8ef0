"""
Least-squares fitting of link-transformed age, AIC stepwise selection with
p-value pruning, link comparison and standardized-coefficient importance.
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import linalg, stats

from .models import AgeModel, Link, Species
from .predictors import (
    PredictorVector,
    derived_parts,
    interaction_name,
    is_known_predictor,
    resolve,
    square_name,
)

P_THRESHOLD = 0.05
AIC_TOLERANCE = 1e-9
CONDITION_LIMIT = 1e12
START_PREDICTOR = "h95_first"


class SingularDesignError(np.linalg.LinAlgError):
    def __init__(self, columns: Sequence[str], condition: float):
        self.columns = list(columns)
        self.condition = condition
        super().__init__(f"design matrix is rank deficient (condition {condition:.3g}); collinear columns: {', '.join(self.columns)}")


class PlotTableError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlotRecord:
    plot_id: str
    species: Species
    si: int
    age: float
    predictors: PredictorVector
    psi: float = math.nan
    species_pred: Species | None = None


@dataclass
class TrainingSet:
    """Column-oriented plots of one (species, SI) stratum."""

    ages: np.ndarray
    columns: dict[str, np.ndarray]
    species: Species = Species.SPRUCE
    si: int = 0
    plot_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.ages = np.asarray(self.ages, dtype=np.float64)
        self.columns = {k: np.asarray(v, dtype=np.float64) for k, v in self.columns.items()}
        if np.any(~(self.ages > 0)):
            raise ValueError("ages must be positive")
        for name, col in self.columns.items():
            if col.shape != self.ages.shape:
                raise ValueError(f"column {name!r} has {col.size} rows, expected {self.ages.size}")

    @property
    def n(self) -> int:
        return self.ages.size

    def column(self, name: str) -> np.ndarray:
        return resolve(name, self.columns.__getitem__)

    @classmethod
    def from_records(cls, records: Sequence[PlotRecord], names: Iterable[str] | None = None) -> TrainingSet:
        if not records:
            raise ValueError("no plots")
        names = list(names) if names is not None else sorted(set().union(*(r.predictors.keys() for r in records)))
        cols = {}
        for name in names:
            col = np.array([r.predictors.raw().get(name, math.nan) for r in records])
            if not np.isnan(col).any():
                cols[name] = col
        return cls(
            np.array([r.age for r in records]),
            cols,
            records[0].species,
            records[0].si,
            [r.plot_id for r in records],
        )


def read_plot_table(path) -> list[PlotRecord]:
    """Plot CSV with ``plot_id,species,si,age`` (optionally ``psi``, ``species_pred``) and predictor columns."""
    records = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"plot_id", "species", "si", "age"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise PlotTableError(f"{path}: missing columns {', '.join(sorted(missing))}")
        meta = required | {"psi", "species_pred"}
        pred_names = [n for n in reader.fieldnames if n not in meta]
        unknown = [n for n in pred_names if not is_known_predictor(n)]
        if unknown:
            raise PlotTableError(f"{path}: unknown predictor columns {', '.join(unknown)}")
        for rowno, row in enumerate(reader, start=2):
            try:
                values = {n: math.nan if row[n] in ("", "NA") else float(row[n]) for n in pred_names}
                records.append(PlotRecord(
                    plot_id=row["plot_id"],
                    species=Species.parse(row["species"]),
                    si=int(float(row["si"])),
                    age=float(row["age"]),
                    predictors=PredictorVector(values),
                    psi=float(row["psi"]) if row.get("psi") not in (None, "", "NA") else math.nan,
                    species_pred=Species.parse(row["species_pred"]) if row.get("species_pred") not in (None, "", "NA") else None,
                ))
            except (TypeError, ValueError) as exc:
                raise PlotTableError(f"{path}: row {rowno}: {exc}") from None
    return records


def write_plot_table(records: Sequence[PlotRecord], path) -> None:
    names = sorted(set().union(*(r.predictors.keys() for r in records))) if records else []
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["plot_id", "species", "si", "age", "psi", "species_pred", *names])
        for r in records:
            raw = r.predictors.raw()
            writer.writerow([
                r.plot_id, r.species.label, r.si, repr(r.age),
                "NA" if math.isnan(r.psi) else repr(r.psi),
                "NA" if r.species_pred is None else r.species_pred.label,
                *("NA" if math.isnan(raw.get(n, math.nan)) else repr(raw[n]) for n in names),
            ])


# ---------------------------------------------------------------------------
# OLS
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TermStat:
    name: str
    estimate: float
    std_error: float
    t_value: float
    p_value: float


@dataclass
class FitSummary:
    model: AgeModel
    terms: list[TermStat]
    r2_adjusted: float
    rss: float
    aic: float
    n: int
    trace: list[tuple[int, str, str, float]] = field(default_factory=list)
    protected: int = 0

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms[1:]]

    def term(self, name: str) -> TermStat:
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(name)


def aic(rss: float, n: int, k: int) -> float:
    """n ln(RSS/n) + 2(k + 1), with k the number of coefficients including the intercept."""
    if n <= 0:
        raise ValueError("n must be positive")
    if rss < 0:
        raise ValueError("rss must be non-negative")
    if rss == 0:
        warnings.warn("zero residual sum of squares: AIC is -inf", RuntimeWarning, stacklevel=2)
        return -math.inf
    return n * math.log(rss / n) + 2 * (k + 1)


def _check_rank(X: np.ndarray, labels: Sequence[str]) -> None:
    norms = np.linalg.norm(X, axis=0)
    zero = norms == 0
    if zero.any():
        raise SingularDesignError([l for l, z in zip(labels, zero) if z], math.inf)
    _, s, vt = np.linalg.svd(X / norms, full_matrices=False)
    cond = s[0] / s[-1] if s[-1] > 0 else math.inf
    if cond > CONDITION_LIMIT:
        weak = vt[s < s[0] / CONDITION_LIMIT] if (s < s[0] / CONDITION_LIMIT).any() else vt[-1:]
        involved = np.abs(weak).max(axis=0) > 1e-6
        raise SingularDesignError([l for l, i in zip(labels, involved) if i], cond)


def _response(data: TrainingSet, link: Link) -> np.ndarray:
    return link.forward(data.ages)


def ols_fit(data: TrainingSet, names: Sequence[str], link: Link = Link.LOG) -> FitSummary:
    """Least squares on the link scale via a QR factorization.

    Standard errors come from sigma^2 (X'X)^-1 and p-values from the
    t distribution with n - p degrees of freedom, p = number of columns.
    """
    names = list(names)
    n, p = data.n, len(names) + 1
    if n <= p:
        raise ValueError(f"need more plots than coefficients: n={n}, coefficients={p}")
    X = np.column_stack([np.ones(n)] + [data.column(name) for name in names])
    y = _response(data, link)
    _check_rank(X, ["Intercept", *names])

    Q, R = np.linalg.qr(X)
    beta = linalg.solve_triangular(R, Q.T @ y)
    resid = y - X @ beta
    rss = float(resid @ resid)
    df = n - p
    sigma2 = rss / df
    r_inv = linalg.solve_triangular(R, np.eye(p))
    se = np.sqrt(sigma2 * np.einsum("ij,ij->i", r_inv, r_inv))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.copysign(np.inf, beta))
    pvals = 2 * stats.t.sf(np.abs(t), df)

    tss = float(((y - y.mean()) ** 2).sum())
    r2_adj = 1 - sigma2 / (tss / (n - 1)) if tss > 0 else math.nan
    terms = [TermStat(name, *map(float, vals)) for name, vals in zip(["Intercept", *names], zip(beta, se, t, pvals))]
    model = AgeModel(data.species, data.si, float(beta[0]), tuple(zip(names, map(float, beta[1:]))), math.sqrt(sigma2), link)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        score = aic(rss, n, p)
    return FitSummary(model, terms, r2_adj, rss, score, n)


def fitted_values(model: AgeModel, data: TrainingSet) -> np.ndarray:
    """Back-transformed predictions in years for every plot of ``data``."""
    eta = model.linear_predictor(data.column)
    eta = np.broadcast_to(np.asarray(eta, dtype=np.float64), data.ages.shape)
    return model.link.inverse(eta, model.sigma)


# ---------------------------------------------------------------------------
# Stepwise selection
# ---------------------------------------------------------------------------


def _base(name: str) -> bool:
    return derived_parts(name) is None


def _derived_pool(selected: Sequence[str], squares: bool, interactions: bool) -> list[str]:
    bases = [n for n in selected if _base(n)]
    pool = []
    if squares:
        pool += [square_name(n) for n in bases]
    if interactions:
        pool += [interaction_name(a, b) for a, b in itertools.combinations(bases, 2)]
    return pool


def _try_fit(data, names, link):
    try:
        return ols_fit(data, names, link)
    except (SingularDesignError, ValueError):
        return None


def stepwise_select(
    data: TrainingSet,
    candidates: Sequence[str],
    link: Link = Link.LOG,
    squares: bool = False,
    interactions: bool = False,
) -> FitSummary:
    """Forward/backward AIC selection from {h95_first}, then p-value pruning.

    Each iteration applies the single add or drop with the lowest AIC when it
    improves the current AIC by more than 1e-9. ``h95_first`` cannot be dropped
    on AIC grounds. Afterwards the term with the largest p >= 0.05 is removed
    and the model refit until every remaining term has p < 0.05.
    """
    if START_PREDICTOR not in candidates:
        raise ValueError(f"candidates must include {START_PREDICTOR}")
    selected = [START_PREDICTOR]
    current = ols_fit(data, selected, link)
    trace = [(0, "start", START_PREDICTOR, current.aic)]
    step = 0
    protected = 0
    while True:
        moves = []
        pool = [c for c in candidates if c not in selected]
        pool += [c for c in _derived_pool(selected, squares, interactions) if c not in selected and c not in pool]
        for name in pool:
            fit = _try_fit(data, selected + [name], link)
            if fit is not None:
                moves.append((fit.aic, "add", name, fit))
        for name in selected:
            fit = _try_fit(data, [s for s in selected if s != name], link)
            if fit is None:
                continue
            if name == START_PREDICTOR:
                if fit.aic < current.aic - AIC_TOLERANCE:
                    protected += 1
                continue
            moves.append((fit.aic, "drop", name, fit))
        if not moves:
            break
        best = min(moves, key=lambda m: m[0])
        if not best[0] < current.aic - AIC_TOLERANCE:
            break
        step += 1
        score, action, name, current = best
        selected = current.names
        trace.append((step, action, name, score))

    while current.terms[1:]:
        worst = max(current.terms[1:], key=lambda t: t.p_value)
        if worst.p_value < P_THRESHOLD:
            break
        selected = [s for s in selected if s != worst.name]
        current = ols_fit(data, selected, link)
        step += 1
        trace.append((step, "drop-p", worst.name, current.aic))

    current.trace = trace
    current.protected = protected
    return current


# ---------------------------------------------------------------------------
# Link comparison and importance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkScore:
    rmse: float
    md: float
    rmse_pct: float
    md_pct: float


def compare_links(data: TrainingSet, names: Sequence[str]) -> dict[Link, LinkScore]:
    """Fit identity, sqrt and log links on the same plots and score them in years."""
    scores = {}
    mean_obs = float(data.ages.mean())
    for link in Link:
        fit = ols_fit(data, names, link)
        d = data.ages - fitted_values(fit.model, data)
        rmse = math.sqrt(float(np.mean(d * d)))
        md = float(np.mean(d))
        scores[link] = LinkScore(rmse, md, 100 * rmse / mean_obs, 100 * md / mean_obs)
    return scores


def best_link(scores: Mapping[Link, LinkScore]) -> Link:
    return min(scores, key=lambda link: scores[link].rmse)


def standardized_importance(fit: FitSummary, data: TrainingSet) -> list[tuple[str, float]]:
    """Refit on z-scored predictors and rank terms by absolute coefficient."""
    names = fit.names
    if not names:
        raise ValueError("model has no predictor terms")
    cols = {}
    for name in names:
        col = data.column(name)
        sd = col.std(ddof=1)
        if not sd > 0:
            warnings.warn(f"predictor {name!r} has zero variance; excluded from importance", RuntimeWarning, stacklevel=2)
            continue
        cols[name] = (col - col.mean()) / sd
    scaled = TrainingSet(data.ages, cols, data.species, data.si, data.plot_ids)
    refit = ols_fit(scaled, list(cols), fit.model.link)
    ranking = [(t.name, abs(t.estimate)) for t in refit.terms[1:]]
    return sorted(ranking, key=lambda item: -item[1])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _p_text(p: float) -> str:
    return "< 0.001" if p < 0.001 else f"{p:.3f}"


def format_fit_report(fits: Sequence[FitSummary]) -> str:
    lines = ["Variable\tEstimate\tStd. Error\tt-Value\tp-value"]
    for fit in fits:
        m = fit.model
        lines.append(f"Model for {m.species.label} SI {m.si}")
        for t in fit.terms:
            lines.append(f"{t.name}\t{t.estimate:.3e}\t{t.std_error:.3e}\t{t.t_value:.3f}\t{_p_text(t.p_value)}")
        lines.append(f"Residual standard error ({m.link.value} scale): {m.sigma:.3f}")
    return "\n".join(lines) + "\n"


def write_fit_csv(fits: Sequence[FitSummary], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["species", "si", "link", "variable", "estimate", "std_error", "t_value", "p_value", "sigma", "n", "r2_adjusted", "aic"])
        for fit in fits:
            m = fit.model
            for t in fit.terms:
                writer.writerow([m.species.label, m.si, m.link.value, t.name, repr(t.estimate), repr(t.std_error),
                                 repr(t.t_value), repr(t.p_value), repr(m.sigma), fit.n, repr(fit.r2_adjusted), repr(fit.aic)])
