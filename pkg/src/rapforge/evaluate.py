"""Attack metrics, threat-model tagging and transfer matrices."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .perturb import PerturbationBudget, SmoothingKernel, adversarial, gaussian_noise_baseline

CSV_HEADER = ["generator", "classifier", "dataset", "threat_model", "epsilon", "n",
              "fool_rate", "top1_clean", "top1_adv", "err_increase", "logit_l2", "seed"]

WHITE_BOX = "white_box"
BLACK_BOX = "black_box"
CROSS_DOMAIN = "cross_domain_black_box"
NOISE_ID = "gaussian-noise"


class BudgetViolation(ValueError):
    pass


class MissingLabelsError(ValueError):
    pass


class ZeroLogitNormError(ZeroDivisionError):
    pass


def _check_pair(clean: np.ndarray, adv: np.ndarray, budget: PerturbationBudget | None) -> None:
    if clean.shape != adv.shape:
        raise ValueError(f"clean {clean.shape} and adversarial {adv.shape} shapes differ")
    if budget is not None and clean.size:
        dev = float(np.abs(adv - clean).max())
        if dev > budget.epsilon + 1e-9:
            raise BudgetViolation(f"perturbation {dev:.6g} exceeds epsilon {budget.epsilon:.6g}")


def fooling_rate(clf, clean: np.ndarray, adv: np.ndarray, budget: PerturbationBudget | None = None) -> float:
    """Percentage of samples whose predicted label changes; ties go to the lowest class index."""
    _check_pair(clean, adv, budget)
    if len(clean) == 0:
        return 0.0
    return 100.0 * float(np.mean(clf.predict(adv) != clf.predict(clean)))


def flip_rate(pred_clean: np.ndarray, pred_adv: np.ndarray) -> float:
    return 100.0 * float(np.mean(np.asarray(pred_clean) != np.asarray(pred_adv))) if len(pred_clean) else 0.0


def top1_and_error_increase(clf, clean: np.ndarray, adv: np.ndarray, labels) -> tuple[float, float, float]:
    """Clean and adversarial top-1 accuracy (%) and the error-rate increase in points."""
    if labels is None:
        raise MissingLabelsError("top-1 accuracy needs labels")
    labels = np.asarray(labels)
    _check_pair(clean, adv, None)
    t_clean = 100.0 * float(np.mean(clf.predict(clean) == labels))
    t_adv = 100.0 * float(np.mean(clf.predict(adv) == labels))
    return t_clean, t_adv, (100.0 - t_adv) - (100.0 - t_clean)


def logit_distance(clf, clean: np.ndarray, adv: np.ndarray) -> float:
    """Mean of ||f(adv) - f(clean)|| / ||f(clean)|| over the batch."""
    _check_pair(clean, adv, None)
    a, b = clf.logits(clean), clf.logits(adv)
    return logit_distance_from(a, b)


def logit_distance_from(clean_logits: np.ndarray, adv_logits: np.ndarray) -> float:
    norms = np.linalg.norm(clean_logits, axis=1)
    if (norms == 0).any():
        raise ZeroLogitNormError("a clean logit vector has zero norm")
    return float(np.mean(np.linalg.norm(adv_logits - clean_logits, axis=1) / norms))


@dataclass
class EvalReport:
    generator: str
    classifier: str
    dataset: str
    epsilon: float
    fool_rate: float
    top1_clean: float | None
    top1_adv: float | None
    err_increase: float | None
    logit_l2: float
    n_samples: int
    seed: int
    threat_model: str = ""
    error: str | None = None

    def row(self) -> list:
        def fmt(v):
            if v is None:
                return ""
            return f"{v:.6f}" if isinstance(v, float) else str(v)
        return [self.generator, self.classifier, self.dataset, self.threat_model, fmt(float(self.epsilon)),
                str(self.n_samples), fmt(self.fool_rate), fmt(self.top1_clean), fmt(self.top1_adv),
                fmt(self.err_increase), fmt(self.logit_l2), str(self.seed)]


def evaluate(clf, clean: np.ndarray, adv: np.ndarray, labels, budget: PerturbationBudget, *,
             generator_id: str, classifier_id: str, dataset_id: str, seed: int,
             threat_model: str = "") -> EvalReport:
    _check_pair(clean, adv, budget)
    a, b = clf.logits(clean), clf.logits(adv)
    fool = flip_rate(a.argmax(axis=1), b.argmax(axis=1))
    t_clean = t_adv = inc = None
    if labels is not None:
        labels = np.asarray(labels)
        t_clean = 100.0 * float(np.mean(a.argmax(axis=1) == labels))
        t_adv = 100.0 * float(np.mean(b.argmax(axis=1) == labels))
        inc = t_clean - t_adv
    return EvalReport(generator_id, classifier_id, dataset_id, budget.epsilon, fool, t_clean, t_adv, inc,
                      logit_distance_from(a, b), len(clean), seed, threat_model)


# --------------------------------------------------------------------------
# transfer matrices


@dataclass
class GeneratorEntry:
    """A trained generator plus where it came from."""

    id: str
    net: object
    trained_against: str
    train_domain: str
    smoothing: SmoothingKernel | None = None


@dataclass
class ClassifierEntry:
    id: str
    net: object
    train_domain: str


def threat_model(gen: GeneratorEntry, clf: ClassifierEntry) -> str:
    if gen.trained_against == clf.id:
        return WHITE_BOX
    if gen.train_domain == clf.train_domain:
        return BLACK_BOX
    return CROSS_DOMAIN


@dataclass
class TransferMatrix:
    rows: list[str]
    cols: list[str]
    cells: dict = field(default_factory=dict)

    def __getitem__(self, key) -> EvalReport:
        return self.cells[key]

    def reports(self) -> list[EvalReport]:
        return [self.cells[(r, c)] for r in self.rows for c in self.cols if (r, c) in self.cells]

    def to_csv(self) -> str:
        return reports_to_csv(self.reports())


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def run_transfer_matrix(generators, classifiers, dataset, budget: PerturbationBudget, *,
                        n_samples: int | None = None, seed: int = 0, include_noise: bool = False,
                        datasets: dict | None = None) -> TransferMatrix:
    """Evaluate every generator against every classifier on one frozen sample set.

    ``dataset`` is a :class:`~rapforge.data.DatasetHandle`. ``datasets`` may
    map a classifier id to its own evaluation set (cross-domain targets);
    the sample subset per dataset is fixed by ``seed``. A failing cell
    records its error and does not stop the others.
    """
    def sample(ds):
        n = len(ds) if n_samples is None else min(n_samples, len(ds))
        idx = np.sort(np.random.default_rng(seed).permutation(len(ds))[:n])
        return ds.images[idx], (ds.labels[idx] if ds.labels is not None else None), ds

    cache = {}
    adv_cache = {}
    rows = [g.id for g in generators] + ([NOISE_ID] if include_noise else [])
    m = TransferMatrix(rows, [c.id for c in classifiers])
    for c in classifiers:
        ds = (datasets or {}).get(c.id, dataset)
        if ds.name not in cache:
            cache[ds.name] = sample(ds)
        x, y, ds = cache[ds.name]
        for g in generators:
            tag = threat_model(g, c)
            try:
                key = (g.id, ds.name)
                if key not in adv_cache:
                    adv_cache[key] = adversarial(g.net, x, budget, g.smoothing)
                rep = evaluate(c.net, x, adv_cache[key], y, budget, generator_id=g.id, classifier_id=c.id,
                               dataset_id=ds.name, seed=seed, threat_model=tag)
            except Exception as exc:  # cell-level isolation
                rep = EvalReport(g.id, c.id, ds.name, budget.epsilon, float("nan"), None, None, None,
                                 float("nan"), len(x), seed, tag, error=f"{type(exc).__name__}: {exc}")
            m.cells[(g.id, c.id)] = rep
        if include_noise:
            noisy = gaussian_noise_baseline(x, budget, seed)
            m.cells[(NOISE_ID, c.id)] = evaluate(c.net, x, noisy, y, budget, generator_id=NOISE_ID,
                                                 classifier_id=c.id, dataset_id=ds.name, seed=seed,
                                                 threat_model=BLACK_BOX)
    return m


def report_dict(rep: EvalReport) -> dict:
    return asdict(rep)
