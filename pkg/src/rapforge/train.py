"""Generator training against a frozen classifier, plus classifier pretraining.

Each generator step is: take a mini-batch, run the generator, optionally
smooth its unbounded output, project into the budget, score clean and
perturbed images with the classifier, and take an Adam step on the
generator. Untargeted objectives are ascended (by descending their
negation); the targeted objective is descended.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import losses as L
from . import nets
from .data import DatasetHandle, split
from .diffcore import Tensor
from .perturb import PerturbationBudget, SmoothingKernel, adversarial, gaussian_kernel, project, smooth

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NaNLossError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.5,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place to ``params`` (arrays or Tensors).

    A ``None`` gradient is treated as zero.
    """
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    if len(grads) != len(arrays):
        raise dc.ShapeError(f"{len(arrays)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(a)
        if g.shape != a.shape or m.shape != a.shape:
            raise dc.ShapeError(f"gradient {g.shape} does not match parameter {a.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        a -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EarlyStop:
    metric: str = "val_fool_rate"
    patience: int = 2


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: L.LossKind = field(default_factory=L.RCEUntargeted)
    budget: PerturbationBudget = field(default_factory=lambda: PerturbationBudget(10 / 255))
    smoothing: SmoothingKernel | None = None
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    label_mode: str = "clean_prediction"
    early_stop: EarlyStop | None = None
    val_fraction: float = 0.1
    # cap on training images per epoch; None uses the whole train split
    max_train: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.label_mode not in ("clean_prediction", "ground_truth"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")

    def to_json(self) -> dict:
        return {
            "loss": L.loss_kind_tag(self.loss_kind),
            "epsilon": self.budget.epsilon,
            "pixel_min": self.budget.pixel_min,
            "pixel_max": self.budget.pixel_max,
            "smoothing": None if self.smoothing is None else {"size": self.smoothing.size, "sigma": self.smoothing.sigma},
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "seed": self.seed,
            "label_mode": self.label_mode,
            "early_stop": None if self.early_stop is None else asdict(self.early_stop),
            "val_fraction": self.val_fraction,
            "max_train": self.max_train,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        sm = d.get("smoothing")
        es = d.get("early_stop")
        return cls(
            loss_kind=L.parse_loss_kind(d["loss"]),
            budget=PerturbationBudget(d["epsilon"], d.get("pixel_min", 0.0), d.get("pixel_max", 1.0)),
            smoothing=None if sm is None else gaussian_kernel(sm["size"], sm["sigma"]),
            epochs=d["epochs"], batch_size=d["batch_size"], lr=d["lr"],
            beta1=d["beta1"], beta2=d["beta2"], seed=d["seed"], label_mode=d["label_mode"],
            early_stop=None if es is None else EarlyStop(**es),
            val_fraction=d.get("val_fraction", 0.1), max_train=d.get("max_train"),
        )


# fields that may change between a checkpoint and a resumed run
_RESUMABLE = {"epochs", "early_stop"}


# --------------------------------------------------------------------------
# one generator step


def generator_loss(gen, clf, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                   clean_logits: np.ndarray | None = None) -> Tensor:
    """Loss of one batch as the generator sees it (before the ascent sign flip)."""
    xt = Tensor(x)
    g = gen(xt)
    if cfg.smoothing is not None:
        g = smooth(g, cfg.smoothing)
    x_adv = project(xt, g, cfg.budget)
    a_prime = clf(x_adv)
    if clean_logits is None:
        with dc.no_grad():
            clean_logits = clf(xt).data
    pair = L.LogitPair(Tensor(clean_logits), a_prime, y)
    kind = cfg.loss_kind
    if isinstance(kind, L.CEUntargeted):
        return L.ce_loss(a_prime, y)
    if isinstance(kind, L.RCEUntargeted):
        return L.rce_loss(pair)
    return L.targeted_loss(pair, np.full(len(y), kind.target))


def _check_shapes(gen, clf, data: DatasetHandle) -> None:
    shape = data.image_shape
    if tuple(gen.input_shape) != shape or tuple(clf.input_shape) != shape:
        raise ConfigError(f"image shape {shape} incompatible with generator {gen.input_shape} "
                          f"or classifier {clf.input_shape}")


def _labels_for(clf, data: DatasetHandle, idx: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    if cfg.label_mode == "ground_truth":
        if data.labels is None:
            raise ConfigError("label_mode=ground_truth needs a labeled dataset")
        return data.labels[idx]
    return clf.predict(data.images[idx])


def fool_rate_np(clf, clean: np.ndarray, adv: np.ndarray) -> float:
    if len(clean) == 0:
        return 0.0
    return 100.0 * float(np.mean(clf.predict(adv) != clf.predict(clean)))


def target_rate_np(clf, clean: np.ndarray, adv: np.ndarray, target: int) -> float:
    keep = clf.predict(clean) != target
    if not keep.any():
        return 0.0
    return 100.0 * float(np.mean(clf.predict(adv[keep]) == target))


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    epoch: int
    generator_path: Path
    optimizer_path: Path
    sidecar_path: Path
    config: dict
    history: list

    @classmethod
    def load(cls, path) -> "Checkpoint":
        """``path`` is the checkpoint directory or its ``checkpoint.json``."""
        path = Path(path)
        side = path / "checkpoint.json" if path.is_dir() else path
        meta = json.loads(side.read_text(encoding="utf-8"))
        d = side.parent
        return cls(meta["epoch"], d / meta["generator"], d / meta["optimizer"], side, meta["config"], meta["history"])


def _write_checkpoint(out_dir: Path, epoch: int, gen, state: AdamState, cfg: TrainConfig,
                      history: list, provenance: dict) -> Checkpoint:
    ck_dir = out_dir / f"epoch_{epoch:03d}"
    ck_dir.mkdir(parents=True, exist_ok=True)
    nets.save_weights(gen, ck_dir / "generator.rapw",
                      extra_meta={"smoothing": cfg.to_json()["smoothing"], **provenance})
    arrays = {}
    for (name, _), m, v in zip(gen.named_parameters(), state.m, state.v):
        arrays[f"m.{name}"] = m
        arrays[f"v.{name}"] = v
    with open(ck_dir / "optimizer.rapw.tmp", "wb") as fh:
        fh.write(nets.encode_arrays(arrays))
    os.replace(ck_dir / "optimizer.rapw.tmp", ck_dir / "optimizer.rapw")
    sidecar = {
        "epoch": epoch,
        "generator": "generator.rapw",
        "optimizer": "optimizer.rapw",
        "adam_t": state.t,
        "config": cfg.to_json(),
        "history": history,
        "provenance": provenance,
    }
    (ck_dir / "checkpoint.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Checkpoint(epoch, ck_dir / "generator.rapw", ck_dir / "optimizer.rapw", ck_dir / "checkpoint.json",
                      sidecar["config"], history)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    generator: nets.GeneratorNet
    history: list
    best_epoch: int
    checkpoints: list


def _prepare_splits(data: DatasetHandle, cfg: TrainConfig) -> DatasetHandle:
    if "train" in data.splits and "val" in data.splits:
        return data
    return split(data, (1.0 - cfg.val_fraction, cfg.val_fraction, 0.0), seed=cfg.seed)


def train_generator(gen: nets.GeneratorNet, clf: nets.ClassifierNet, data: DatasetHandle,
                    cfg: TrainConfig, out_dir=None, provenance: dict | None = None,
                    on_epoch: Callable[[dict], None] | None = None,
                    _start_epoch: int = 0, _state: AdamState | None = None,
                    _history: list | None = None) -> TrainResult:
    """Train ``gen`` against the frozen ``clf`` on ``data`` and return the history.

    ``out_dir`` receives one checkpoint directory per epoch. With early
    stopping configured, the returned generator holds the weights of the
    best epoch on the monitored validation metric.
    """
    if not clf.frozen:
        raise ConfigError("the classifier must be frozen before generator training")
    _check_shapes(gen, clf, data)
    if cfg.label_mode == "ground_truth" and data.labels is None:
        raise ConfigError("label_mode=ground_truth needs a labeled dataset")
    data = _prepare_splits(data, cfg)
    train_idx = data.indices("train")
    val_idx = data.indices("val")
    if cfg.max_train is not None:
        train_idx = train_idx[: cfg.max_train]
    x_train = data.images[train_idx]
    with dc.no_grad():
        clean_logits = clf.logits(x_train)
    if cfg.label_mode == "ground_truth":
        y_train = data.labels[train_idx]
    else:
        y_train = clean_logits.argmax(axis=1)
    x_val = data.images[val_idx]

    targeted = isinstance(cfg.loss_kind, L.Targeted)
    sign = 1.0 if targeted else -1.0
    params = gen.parameters()
    state = _state or AdamState()
    history = list(_history or [])
    out_dir = Path(out_dir) if out_dir is not None else None
    provenance = dict(provenance or {})
    checkpoints = []
    best = (-math.inf, _start_epoch, gen.state_dict())
    for rec in history:
        if rec.get("val_fool_rate", -math.inf) > best[0]:
            best = (rec["val_fool_rate"], rec["epoch"], best[2])
    stale = 0

    for epoch in range(_start_epoch + 1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(x_train))
        losses = []
        first_batch = None
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb, yb, ab = x_train[idx], y_train[idx], clean_logits[idx]
            if targeted:
                keep = yb != cfg.loss_kind.target
                xb, yb, ab = xb[keep], yb[keep], ab[keep]
                if len(xb) == 0:
                    continue
            loss = generator_loss(gen, clf, xb, yb, cfg, ab)
            value = loss.item()
            if not math.isfinite(value):
                raise NaNLossError(f"non-finite loss at epoch {epoch}, batch {bi}")
            losses.append(value)
            if first_batch is None:
                first_batch = (xb, yb, ab)
            gen.zero_grad()
            dc.backward(loss * sign)
            adam_step(params, [p.grad for p in params], state, cfg.lr, cfg.beta1, cfg.beta2)
        gen.zero_grad()
        loss_end = float("nan")
        if first_batch is not None:
            # same samples as loss_first, scored by the end-of-epoch generator
            with dc.no_grad():
                loss_end = generator_loss(gen, clf, *first_batch[:2], cfg, first_batch[2]).item()

        adv_val = adversarial(gen, x_val, cfg.budget, cfg.smoothing)
        rec = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "loss_first": losses[0] if losses else float("nan"),
            "loss_last": losses[-1] if losses else float("nan"),
            "loss_end": loss_end,
            "val_fool_rate": fool_rate_np(clf, x_val, adv_val),
            "steps": state.t,
        }
        if targeted:
            rec["val_target_rate"] = target_rate_np(clf, x_val, adv_val, cfg.loss_kind.target)
        history.append(rec)
        log.info("epoch %d loss %.5f val fool %.2f%%", epoch, rec["loss"], rec["val_fool_rate"])
        if out_dir is not None:
            checkpoints.append(_write_checkpoint(out_dir, epoch, gen, state, cfg, history, provenance))
        if on_epoch is not None:
            on_epoch(rec)

        if rec["val_fool_rate"] > best[0]:
            best = (rec["val_fool_rate"], epoch, gen.state_dict())
            stale = 0
        else:
            stale += 1
        if cfg.early_stop is not None and stale >= cfg.early_stop.patience:
            log.info("early stop after epoch %d (best epoch %d)", epoch, best[1])
            break

    best_epoch = history[-1]["epoch"] if history else _start_epoch
    if cfg.early_stop is not None and history:
        best_epoch = best[1]
        gen.load_state_dict(best[2])
    return TrainResult(gen, history, best_epoch, checkpoints)


def resume(checkpoint, clf: nets.ClassifierNet, data: DatasetHandle, cfg: TrainConfig,
           out_dir=None) -> TrainResult:
    """Continue training from ``checkpoint`` (a :class:`Checkpoint` or its path)."""
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    saved, now = dict(ck.config), cfg.to_json()
    diff = sorted(k for k in set(saved) | set(now) if k not in _RESUMABLE and saved.get(k) != now.get(k))
    if diff:
        raise ConfigError(f"checkpoint config differs from the requested config in: {diff}")
    gen = nets.load_weights(ck.generator_path)
    with open(ck.optimizer_path, "rb") as fh:
        arrays = nets.decode_arrays(fh.read())
    side = json.loads(Path(ck.sidecar_path).read_text(encoding="utf-8"))
    names = [n for n, _ in gen.named_parameters()]
    state = AdamState([arrays[f"m.{n}"] for n in names], [arrays[f"v.{n}"] for n in names], side["adam_t"])
    return train_generator(gen, clf, data, cfg, out_dir=out_dir, provenance=side.get("provenance"),
                           _start_epoch=ck.epoch, _state=state, _history=ck.history)


# --------------------------------------------------------------------------
# classifier pretraining (stand-in for an off-the-shelf pretrained model)


def train_classifier(clf: nets.ClassifierNet, data: DatasetHandle, epochs: int = 3, batch_size: int = 32,
                     lr: float = 1e-3, seed: int = 0,
                     on_epoch: Callable[[dict], None] | None = None) -> dict:
    """Supervised cross-entropy training with Adam(0.9, 0.999); returns accuracies in %.

    ``on_epoch`` receives ``{"epoch", "train_loss"}`` after every epoch, the
    loss being the mean mini-batch cross-entropy over that epoch.
    """
    if data.labels is None:
        raise ConfigError(f"dataset {data.name!r} is unlabeled; classifiers need labels")
    if "train" not in data.splits:
        data = split(data, (0.9, 0.1, 0.0), seed=seed)
    tr, va = data.indices("train"), data.indices("val")
    x, y = data.images[tr], data.labels[tr]
    params = clf.parameters()
    state = AdamState()
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, epoch, 7]).permutation(len(x))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = L.ce_loss(clf(Tensor(x[idx])), y[idx])
            losses.append(loss.item())
            clf.zero_grad()
            dc.backward(loss)
            adam_step(params, [p.grad for p in params], state, lr, 0.9, 0.999)
        if not np.isfinite(losses).all():
            raise NaNLossError(f"non-finite classifier loss in epoch {epoch}")
        if on_epoch is not None:
            on_epoch({"epoch": epoch, "train_loss": float(np.mean(losses))})
    clf.zero_grad()
    train_acc = 100.0 * float(np.mean(clf.predict(x) == y))
    val_acc = 100.0 * float(np.mean(clf.predict(data.images[va]) == data.labels[va])) if len(va) else float("nan")
    return {"train_acc": train_acc, "val_acc": val_acc, "epochs": epochs, "seed": seed}
