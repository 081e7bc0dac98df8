"""Attack objectives on classifier logits and their closed-form gradients.

Three objectives are provided:

* ``ce_loss``: cross-entropy of the perturbed logits against the label,
  ascended by the trainer.
* ``rce_loss``: relativistic cross-entropy, i.e. cross-entropy of the
  softmax of the logit *difference* ``a' - a``, also ascended.
* ``targeted_loss``: cross-entropy towards a target class on the perturbed
  logits plus the clean cross-entropy term, descended.

Clean logits never carry gradient: the clean image does not pass through
the generator, so they are detached on entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class CEUntargeted:
    tag: Literal["ce"] = "ce"


@dataclass(frozen=True)
class RCEUntargeted:
    tag: Literal["rce"] = "rce"


@dataclass(frozen=True)
class Targeted:
    target: int
    tag: Literal["targeted"] = "targeted"


LossKind = Union[CEUntargeted, RCEUntargeted, Targeted]


def parse_loss_kind(text: str) -> LossKind:
    """Parse ``ce``, ``rce`` or ``targeted:K``."""
    text = text.strip().lower()
    if text == "ce":
        return CEUntargeted()
    if text == "rce":
        return RCEUntargeted()
    if text.startswith("targeted:"):
        try:
            return Targeted(int(text.split(":", 1)[1]))
        except ValueError:
            pass
    raise ValueError(f"invalid loss tag {text!r}; expected ce, rce or targeted:K")


def loss_kind_tag(kind: LossKind) -> str:
    return f"targeted:{kind.target}" if isinstance(kind, Targeted) else kind.tag


@dataclass
class LogitPair:
    a: Tensor
    a_prime: Tensor
    y: np.ndarray

    def __post_init__(self):
        self.a = _as_tensor(self.a)
        self.a_prime = _as_tensor(self.a_prime)
        if self.a.shape != self.a_prime.shape:
            raise dc.ShapeError(f"clean logits {self.a.shape} and perturbed logits {self.a_prime.shape} differ")
        self.y = _labels(self.y, self.a_prime)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    return Tensor(arr[None, :] if arr.ndim == 1 else arr)


def _labels(y, logits: Tensor) -> np.ndarray:
    if logits.ndim != 2:
        raise dc.ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n, c = logits.shape
    if y.shape != (n,):
        raise dc.ShapeError(f"labels shape {y.shape} does not match batch size {n}")
    if (y < 0).any() or (y >= c).any():
        raise LabelError(f"labels must lie in [0, {c}), got {y.min()}..{y.max()}")
    return y


def one_hot(y: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((len(y), c))
    out[np.arange(len(y)), y] = 1.0
    return out


def _ce_from_logits(z: Tensor, y: np.ndarray) -> Tensor:
    n, c = z.shape
    picked = dc.sum(dc.log_softmax(z) * one_hot(y, c))
    return picked * (-1.0 / n)


def ce_loss(a_prime, y) -> Tensor:
    """Mean over the batch of ``-log softmax(a')[y]``."""
    a_prime = _as_tensor(a_prime)
    return _ce_from_logits(a_prime, _labels(y, a_prime))


def rce_loss(pair: LogitPair) -> Tensor:
    """Mean over the batch of ``-log softmax(a' - a)[y]`` with ``a`` held constant."""
    return _ce_from_logits(pair.a_prime - pair.a.detach(), pair.y)


def targeted_loss(pair: LogitPair, y_target) -> Tensor:
    """``CE(a', y') + CE(a, y)``; the second term has no path to the generator."""
    yt = _labels(y_target if np.ndim(y_target) else np.full(len(pair.y), int(y_target)), pair.a_prime)
    if (yt == pair.y).any():
        raise LabelError("targeted loss requires target label != source label for every sample")
    return _ce_from_logits(pair.a_prime, yt) + _ce_from_logits(pair.a.detach(), pair.y)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def analytic_ce_grad(a_prime, y) -> np.ndarray:
    """Per-sample gradient ``softmax(a') - onehot(y)`` (not divided by batch size)."""
    a_prime = _as_tensor(a_prime)
    y = _labels(y, a_prime)
    return _softmax(a_prime.data) - one_hot(y, a_prime.shape[1])


def analytic_rce_grad(pair: LogitPair) -> np.ndarray:
    """Per-sample gradient ``softmax(a' - a) - onehot(y)``."""
    return _softmax(pair.a_prime.data - pair.a.data) - one_hot(pair.y, pair.a.shape[1])


@dataclass(frozen=True)
class DominanceReport:
    rce_norm: float
    ce_norm: float
    dominant: bool
    precondition_held: bool
    # l1 norm and y-component comparisons; these two always agree with each other
    rce_y: float
    ce_y: float
    dominant_y: bool


def precondition_holds(a: np.ndarray, a_prime: np.ndarray, y: int, margin: float = 1.0) -> bool:
    """Clean logits confident on ``y`` and perturbed logits least on ``y``, each by ``margin``."""
    others = np.delete(np.arange(len(a)), y)
    return bool(a[y] - a[others].max() >= margin and a_prime[others].min() - a_prime[y] >= margin)


def dominance_check(pair: LogitPair, margin: float = 1.0) -> list[DominanceReport]:
    """Compare the gradient strength of RCE and CE w.r.t. the perturbed logits, per sample.

    ``dominant`` compares the l2 norms of the two gradient vectors.
    ``dominant_y`` compares the magnitudes of the true-class component,
    ``1 - r_y`` against ``1 - p'_y``, which also orders the l1 norms since
    each gradient row sums to zero.
    """
    g_ce = analytic_ce_grad(pair.a_prime, pair.y)
    g_rce = analytic_rce_grad(pair)
    out = []
    for i, y in enumerate(pair.y):
        rn, cn = float(np.linalg.norm(g_rce[i])), float(np.linalg.norm(g_ce[i]))
        ry, cy = float(-g_rce[i, y]), float(-g_ce[i, y])
        out.append(DominanceReport(
            rce_norm=rn, ce_norm=cn, dominant=rn > cn,
            precondition_held=precondition_holds(pair.a.data[i], pair.a_prime.data[i], int(y), margin),
            rce_y=ry, ce_y=cy, dominant_y=ry > cy,
        ))
    return out


def sample_precondition_pairs(n: int, num_classes: int, rng: np.random.Generator,
                              margin: float = 1.0, low: float = -5.0, high: float = 5.0):
    """Draw logit pairs that satisfy the confident-clean / confident-wrong precondition.

    Logits are uniform in ``[low, high]``; the true class is then raised
    above the clean maximum and lowered below the perturbed minimum by
    ``margin`` plus a uniform extra in ``[0, high - low]``.
    """
    y = rng.integers(0, num_classes, size=n)
    a = rng.uniform(low, high, size=(n, num_classes))
    ap = rng.uniform(low, high, size=(n, num_classes))
    rows = np.arange(n)
    a[rows, y] = -np.inf
    ap[rows, y] = np.inf
    a[rows, y] = a.max(axis=1) + margin + rng.uniform(0, high - low, size=n)
    ap[rows, y] = ap.min(axis=1) - margin - rng.uniform(0, high - low, size=n)
    return a, ap, y


def ascent_trajectory(steps: int = 10, n: int = 100, num_classes: int = 10, dim: int = 64,
                      epsilon: float = 0.3, momentum: float = 1.0, seed: int = 0) -> list[dict]:
    """Momentum sign-ascent on a small linear softmax classifier, once per loss.

    The classifier is a fixed random linear map scaled so clean predictions
    are confident. Starting from the clean inputs, each step ascends the
    chosen loss (CE or RCE, labels = clean predictions) with a
    momentum-accumulated, l1-normalized input gradient and a sign update of
    size ``epsilon / steps``, staying inside the ``epsilon`` ball. Each
    returned row holds, per step, the mean loss and the mean l2 norm of the
    input gradient for both runs.
    """
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0, size=(dim, num_classes)) * (4.0 / np.sqrt(dim))
    x0 = rng.uniform(-1.0, 1.0, size=(n, dim))
    wt = Tensor(w)
    a = x0 @ w
    y = a.argmax(axis=1)
    alpha = epsilon / steps

    def loss_and_grad(x, which):
        xt = Tensor(x, requires_grad=True)
        a_prime = dc.matmul(xt, wt)
        loss = ce_loss(a_prime, y) if which == "ce" else rce_loss(LogitPair(Tensor(a), a_prime, y))
        dc.backward(loss)
        # the loss is a batch mean; rescale to per-sample gradients
        return loss.item(), xt.grad * n

    runs = {}
    for which in ("ce", "rce"):
        x = x0.copy()
        g_acc = np.zeros_like(x)
        rows = []
        for t in range(steps + 1):
            value, grad = loss_and_grad(x, which)
            rows.append((value, float(np.mean(np.linalg.norm(grad, axis=1)))))
            if t == steps:
                break
            g_acc = momentum * g_acc + grad / (np.abs(grad).sum(axis=1, keepdims=True) + 1e-12)
            x = np.clip(x + alpha * np.sign(g_acc), x0 - epsilon, x0 + epsilon)
        runs[which] = rows
    return [
        {"step": t, "ce_loss": runs["ce"][t][0], "rce_loss": runs["rce"][t][0],
         "ce_grad_norm": runs["ce"][t][1], "rce_grad_norm": runs["rce"][t][1]}
        for t in range(steps + 1)
    ]
