"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The experiment criteria (5 to 9) share session-cached classifiers and
generators. Their sizes come from the pilot scripts in demos/ and are pinned
here; see the README for the measured values.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats
from scipy.special import log_softmax

from rapforge import cli
from rapforge import data as D
from rapforge import diffcore as dc
from rapforge import losses as L
from rapforge import nets
from rapforge import train as T
from rapforge.diffcore import Tensor
from rapforge.perturb import (PerturbationBudget, adversarial, gaussian_kernel, gaussian_noise_baseline,
                              project_np, smooth)

# ---------------------------------------------------------------- 1. gradients


def _fd_grad(loss_fn, z, h=1e-3):
    """Five-point central differences of a per-row loss, one coordinate at a time.

    The fourth-order stencil keeps truncation near h**4 with a step large
    enough that roundoff stays small next to gradients of order 1e-5.
    """
    g = np.empty_like(z)
    for j in range(z.shape[1]):
        def at(k):
            w = z.copy()
            w[:, j] += k * h
            return loss_fn(w)
        g[:, j] = (at(-2) - 8 * at(-1) + 8 * at(1) - at(2)) / (12 * h)
    return g


def _rowwise_rel(a, b):
    return np.linalg.norm(a - b, axis=1) / np.maximum(np.linalg.norm(b, axis=1), 1e-300)


def test_criterion_01_gradient_correctness(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_fd, worst_ad = 0.0, 0.0
    for c in (2, 10):
        n = 500
        a = rng.uniform(-5, 5, size=(n, c))
        ap = rng.uniform(-5, 5, size=(n, c))
        y = rng.integers(0, c, size=n)
        rows = np.arange(n)
        ce_oracle = lambda z: -log_softmax(z, axis=1)[rows, y]
        rce_oracle = lambda z: -log_softmax(z - a, axis=1)[rows, y]
        an_ce = L.analytic_ce_grad(ap, y)
        an_rce = L.analytic_rce_grad(L.LogitPair(a, ap, y))
        worst_fd = max(worst_fd, _rowwise_rel(_fd_grad(ce_oracle, ap), an_ce).max(),
                       _rowwise_rel(_fd_grad(rce_oracle, ap), an_rce).max())
        # autodiff: losses are batch means, so scale back to per-sample gradients
        t = Tensor(ap, requires_grad=True)
        dc.backward(L.ce_loss(t, y))
        ad_ce = t.grad * n
        t = Tensor(ap, requires_grad=True)
        dc.backward(L.rce_loss(L.LogitPair(Tensor(a), t, y)))
        ad_rce = t.grad * n
        worst_ad = max(worst_ad, np.abs(ad_ce - an_ce).max(), np.abs(ad_rce - an_rce).max())
    elapsed = time.perf_counter() - start
    ok = worst_fd < 1e-6 and worst_ad <= 1e-12 and elapsed < 10.0
    verdict(1, ok, f"1000 pairs, c in {{2,10}}: FD rel err {worst_fd:.2e} (<1e-6), "
                   f"autodiff abs err {worst_ad:.2e} (<=1e-12), {elapsed:.1f}s (<10s)")
    assert ok


# ---------------------------------------------------------------- 2. dominance


def _rejection_pairs(n, c, rng, margin=1.0, chunk=50_000):
    """Uniform logits in [-5, 5], kept only when the precondition holds with ``margin``."""
    keep_a, keep_ap, keep_y, have = [], [], [], 0
    while have < n:
        a = rng.uniform(-5, 5, size=(chunk, c))
        ap = rng.uniform(-5, 5, size=(chunk, c))
        y = rng.integers(0, c, size=chunk)
        rows = np.arange(chunk)
        others_a = np.where(np.eye(c, dtype=bool)[y], -np.inf, a).max(axis=1)
        others_ap = np.where(np.eye(c, dtype=bool)[y], np.inf, ap).min(axis=1)
        ok = (a[rows, y] - others_a >= margin) & (others_ap - ap[rows, y] >= margin)
        keep_a.append(a[ok])
        keep_ap.append(ap[ok])
        keep_y.append(y[ok])
        have += int(ok.sum())
    return np.vstack(keep_a)[:n], np.vstack(keep_ap)[:n], np.concatenate(keep_y)[:n]


def test_criterion_02_rce_gradient_dominates_ce(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    parts, detail = [], []
    for c in (2, 10):
        a, ap, y = _rejection_pairs(5000, c, rng)
        reps = L.dominance_check(L.LogitPair(a, ap, y), margin=1.0)
        assert all(r.precondition_held for r in reps)
        l2 = np.mean([r.dominant for r in reps])
        y_comp = np.mean([r.dominant_y for r in reps])
        parts.append(l2)
        detail.append(f"c={c}: l2 {100 * l2:.2f}% (y-component {100 * y_comp:.2f}%)")
    elapsed = time.perf_counter() - start
    overall = float(np.mean(parts))
    ok = overall == 1.0 and elapsed < 10.0
    verdict(2, ok, f"10000 precondition pairs, l2 dominance {100 * overall:.2f}% (need 100%); "
                   + "; ".join(detail) + f"; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3. projection


def test_criterion_03_projection_exactness(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    n, d = 10_000, 16
    x = rng.uniform(0, 1, size=(n, d))
    x[: n // 10] = rng.choice([0.0, 1.0], size=(n // 10, d))
    mag = 10.0 ** rng.uniform(-3, 9, size=(n, 1))
    g = rng.normal(size=(n, d)) * mag
    eps = rng.uniform(1e-6, 1.0, size=(n, 1))
    bad_ball = bad_pix = bad_idem = 0
    for i in range(n):
        b = PerturbationBudget(float(eps[i, 0]))
        out = project_np(x[i], g[i], b)
        bad_ball += int(np.any(np.abs(out - x[i]) > b.epsilon))
        bad_pix += int(np.any((out < 0.0) | (out > 1.0)))
        bad_idem += int(not np.array_equal(project_np(x[i], out, b), out))
    elapsed = time.perf_counter() - start
    ok = bad_ball == bad_pix == bad_idem == 0 and elapsed < 5.0
    verdict(3, ok, f"10000 triples, |g| up to {float(np.abs(g).max()):.1e}: ball violations {bad_ball}, "
                   f"pixel violations {bad_pix}, non-idempotent {bad_idem}, {elapsed:.1f}s (<5s)")
    assert ok


# ---------------------------------------------------------------- 4. smoothing kernel


def test_criterion_04_gaussian_kernel(verdict):
    k = gaussian_kernel(3, 1.0)
    expected = 1.0 / (1.0 + 4.0 * math.exp(-0.5) + 4.0 * math.exp(-1.0))
    center_err = abs(k.weights[1, 1] - expected)
    worst = 0.0
    for value in (0.0, 0.37, 1.0):
        img = np.full((2, 3, 11, 9), value)
        worst = max(worst, float(np.abs(smooth(Tensor(img), k).data - img).max()))
    ok = center_err <= 1e-12 and worst <= 1e-12
    verdict(4, ok, f"center weight {k.weights[1, 1]:.10f} err {center_err:.1e} (<=1e-12), "
                   f"constant-image drift {worst:.1e} (<=1e-12)")
    assert ok


# ---------------------------------------------------------------- desk-scale experiments (5 to 9)

# Pinned from the pilot runs (demos/pilot_desk_scale.py); see README "Acceptance results".
CLF_TRAIN, CLF_EPOCHS, CLF_LR = 10_000, 3, 2e-3
OTHER_TRAIN = 6_000
TEST_SIZE = 1_000
GEN_LR, GEN_BATCH, GEN_EPOCHS = 3e-3, 16, 5
WB_SIZE = {0.3: 3_000, 10 / 255: 12_000}
TRANSFER_SIZE, TRANSFER_EPOCHS = 2_000, 3
TARGET_CLASS = 3


def _synth(name, seed, size, subset=None):
    params = {"subset": subset} if subset else {}
    return D.synth_domain(D.DomainSpec("synthetic", name, seed, size, params))


def _fit_classifier(arch, data, seed=0):
    clf = nets.build_classifier(arch, seed)
    T.train_classifier(clf, D.split(data, (0.9, 0.1, 0.0), seed=seed), epochs=CLF_EPOCHS, lr=CLF_LR, seed=seed)
    return clf.freeze()


class Desk:
    """Lazily trained classifiers and generators, shared across criteria."""

    def __init__(self):
        self._clf, self._gen, self.seconds = {}, {}, {}

    def classifier(self, key):
        if key not in self._clf:
            t0 = time.perf_counter()
            if key == "A":
                self._clf[key] = _fit_classifier("convnet-s", _synth("digits", 0, CLF_TRAIN, "train"))
            elif key == "B":
                self._clf[key] = _fit_classifier("convnet-m", _synth("digits", 0, OTHER_TRAIN, "train"))
            elif key == "glyphs":
                self._clf[key] = _fit_classifier("convnet-m", _synth("glyphs", 0, OTHER_TRAIN))
            self.seconds[("clf", key)] = time.perf_counter() - t0
        return self._clf[key]

    def test_set(self, domain):
        return _synth(domain, 1, TEST_SIZE, "test" if domain == "digits" else None)

    def generator(self, loss, eps, seed, size, epochs=GEN_EPOCHS, domain="digits"):
        key = (loss, eps, seed, size, epochs, domain)
        if key not in self._gen:
            clf = self.classifier("A")
            t0 = time.perf_counter()
            data = _synth(domain, 100 + seed, size, "train" if domain == "digits" else None)
            cfg = T.TrainConfig(loss_kind=L.parse_loss_kind(loss), budget=PerturbationBudget(eps),
                                epochs=epochs, batch_size=GEN_BATCH, lr=GEN_LR, seed=seed)
            res = T.train_generator(nets.build_generator("resgen-s", seed), clf, data, cfg)
            self._gen[key] = (res, cfg)
            self.seconds[("gen",) + key] = time.perf_counter() - t0
        return self._gen[key]


@pytest.fixture(scope="session")
def desk():
    return Desk()


def _wb_runs(desk):
    clf, test = desk.classifier("A"), desk.test_set("digits")
    out = {}
    for eps, size in WB_SIZE.items():
        for seed in (0, 1, 2):
            res, cfg = desk.generator("rce", eps, seed, size)
            adv = adversarial(res.generator, test.images, cfg.budget)
            out[eps, seed] = (T.fool_rate_np(clf, test.images, adv), res.history)
    return out


def test_criterion_05_white_box_efficacy(verdict, desk):
    runs = _wb_runs(desk)
    spent = desk.seconds[("clf", "A")] + sum(
        desk.seconds[("gen", "rce", eps, seed, size, GEN_EPOCHS, "digits")]
        for eps, size in WB_SIZE.items() for seed in (0, 1, 2))
    mean = {eps: float(np.mean([runs[eps, s][0] for s in (0, 1, 2)])) for eps in WB_SIZE}
    per = {eps: ", ".join(f"{runs[eps, s][0]:.1f}" for s in (0, 1, 2)) for eps in WB_SIZE}
    ok = mean[0.3] >= 90.0 and mean[10 / 255] >= 60.0 and spent < 20 * 60
    verdict(5, ok, f"mean fool rate eps=0.3 {mean[0.3]:.1f}% (>=90; seeds {per[0.3]}), "
                   f"eps=10/255 {mean[10 / 255]:.1f}% (>=60; seeds {per[10 / 255]}), {spent / 60:.1f} min (<20)")
    assert ok


def test_criterion_06_rce_transfers_better_than_ce(verdict, desk):
    a, b, test = desk.classifier("A"), desk.classifier("B"), desk.test_set("digits")
    eps = 16 / 255
    diffs, pairs = [], []
    for seed in range(5):
        rates = {}
        for loss in ("rce", "ce"):
            res, cfg = desk.generator(loss, eps, seed, TRANSFER_SIZE, epochs=TRANSFER_EPOCHS)
            adv = adversarial(res.generator, test.images, cfg.budget)
            rates[loss] = T.fool_rate_np(b, test.images, adv)
        pairs.append(f"{rates['rce']:.1f}/{rates['ce']:.1f}")
        diffs.append(rates["rce"] - rates["ce"])
    nonzero = [d for d in diffs if d != 0]
    k = sum(d > 0 for d in nonzero)
    p = stats.binomtest(k, len(nonzero), 0.5, alternative="greater").pvalue if nonzero else 1.0
    ok = float(np.mean(diffs)) > 0 and p < 0.05
    verdict(6, ok, f"black-box A->B, eps=16/255, 5 seeds (RCE/CE {', '.join(pairs)}): mean paired diff "
                   f"{np.mean(diffs):+.2f} pts, {k}/{len(nonzero)} positive, sign test p={p:.3f} (<0.05)")
    assert ok


def test_criterion_07_cross_domain_beats_noise(verdict, desk):
    target, test = desk.classifier("glyphs"), desk.test_set("glyphs")
    eps = 16 / 255
    ratios, parts = [], []
    for seed in (0, 1, 2):
        res, cfg = desk.generator("rce", eps, seed, WB_SIZE[0.3], domain="stripes")
        fool = T.fool_rate_np(target, test.images, adversarial(res.generator, test.images, cfg.budget))
        noise = T.fool_rate_np(target, test.images, gaussian_noise_baseline(test.images, cfg.budget, seed))
        ratios.append(fool / noise if noise > 0 else (math.inf if fool > 0 else 0.0))
        parts.append(f"{fool:.1f} vs {noise:.1f}")
    ok = all(r >= 1.5 for r in ratios)
    verdict(7, ok, f"stripes-trained vs digits clf, evaluated on glyphs clf, eps=16/255 (gen vs noise: "
                   f"{'; '.join(parts)}): min ratio {min(ratios):.2f} (>=1.5 every seed)")
    assert ok


def test_criterion_08_targeted_attack(verdict, desk):
    clf, test = desk.classifier("A"), desk.test_set("digits")
    rates = []
    for seed in (0, 1, 2):
        res, cfg = desk.generator(f"targeted:{TARGET_CLASS}", 0.3, seed, WB_SIZE[0.3])
        adv = adversarial(res.generator, test.images, cfg.budget)
        rates.append(T.target_rate_np(clf, test.images, adv, TARGET_CLASS))
    ok = min(rates) >= 50.0
    verdict(8, ok, f"target class {TARGET_CLASS}, eps=0.3, held-out success "
                   f"{', '.join(f'{r:.1f}' for r in rates)}% (>=50 every seed)")
    assert ok


def test_criterion_09_epoch_trend(verdict, desk):
    runs = _wb_runs(desk)
    worst, curves = 0.0, []
    for (eps, seed), (_, history) in sorted(runs.items()):
        rates = [r["val_fool_rate"] for r in history]
        drops = [rates[i] - rates[i + 1] for i in range(len(rates) - 1)]
        worst = max(worst, max(drops))
        label = "0.3" if eps == 0.3 else f"{eps * 255:.0f}/255"
        curves.append(f"eps={label} s{seed}: " + "/".join(f"{r:.1f}" for r in rates))
    ok = worst <= 2.0
    verdict(9, ok, f"largest epoch-to-epoch drop {worst:.2f} pts (<=2); " + "; ".join(curves))
    assert ok


# ---------------------------------------------------------------- 10. determinism and persistence


def _pipeline(root: Path) -> Path:
    cfg = {
        "out_dir": "out",
        "seed": 3,
        "data": [
            {"id": "digits", "kind": "synthetic", "size": 160, "params": {"subset": "train"}},
            {"id": "digits-test", "kind": "synthetic", "name": "digits", "seed": 5, "size": 12,
             "params": {"subset": "test"}},
        ],
        "classifiers": [{"id": "A", "arch": "convnet-s", "data": "digits", "epochs": 1}],
        "generator": {"classifier": "A", "data": "digits", "epsilon": 16, "epochs": 2, "lr": 1e-3,
                      "max_train": 64},
        "eval": {"data": "digits-test", "targets": ["A"], "generators": ["gen-rce"], "epsilons": [10, 16]},
    }
    root.mkdir(parents=True)
    conf = str(root / "cfg.json")
    (root / "cfg.json").write_text(json.dumps(cfg), encoding="utf-8")
    gen = str(root / "out" / "generators" / "gen-rce" / "generator.rapw")
    for argv in (["train-classifier", "--name", "A"], ["train-generator", "--loss", "rce"],
                 ["attack", "--generator", gen, "--dataset", "digits-test", "--epsilon", "10",
                  "--out", str(root / "out" / "attack")],
                 ["eval"], ["gradlab", "--trials", "200"]):
        assert cli.main([argv[0], "--config", conf, *argv[1:]]) == 0
    return root / "out"


def test_criterion_10_determinism_and_persistence(verdict, tmp_path):
    first, second = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    kinds = {s: sum(1 for f in files if f.suffix == s) for s in (".rapw", ".csv", ".png")}
    differing = [str(f) for f in files if (first / f).read_bytes() != (second / f).read_bytes()]
    same_tree = files == sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())

    clf = nets.load_weights(first / "classifiers" / "A.rapw")
    nets.save_weights(clf, tmp_path / "rt.rapw")
    back = nets.load_weights(tmp_path / "rt.rapw")
    bit_exact = all(p.data.tobytes() == q.data.tobytes() for p, q in zip(clf.parameters(), back.parameters()))

    ckpt = first / "generators" / "gen-rce" / "epoch_002" / "generator.rapw"
    blob = bytearray(ckpt.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    ckpt.write_bytes(bytes(blob))
    try:
        nets.load_weights(ckpt)
        caught = False
    except nets.ChecksumError:
        caught = True

    ok = same_tree and not differing and all(kinds.values()) and bit_exact and caught
    verdict(10, ok, f"{len(files)} artifacts ({kinds['.rapw']} weights, "
                    f"{kinds['.csv']} CSVs, {kinds['.png']} PNGs) byte-identical: {not differing}; "
                    f"round-trip bit-exact: {bit_exact}; corruption detected: {caught}")
    assert ok, differing
