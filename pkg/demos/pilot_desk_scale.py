"""Pilot runs that fixed the desk-scale recipe used by the acceptance suite.

Run one stage at a time; each prints per-epoch history and a held-out
result. Stages and their single-CPU cost:

    python3 demos/pilot_desk_scale.py classifiers   # ~1 min
    python3 demos/pilot_desk_scale.py white-box     # ~10 min (eps 0.3 and 10/255, one seed)
    python3 demos/pilot_desk_scale.py transfer      # ~12 min (RCE vs CE, 5 seeds)
    python3 demos/pilot_desk_scale.py targeted      # ~2 min
    python3 demos/pilot_desk_scale.py cross-domain  # ~4 min

Measured values are listed in demos/pilot_results.md.
"""

import argparse
import time

from rapforge import data as D
from rapforge import losses as L
from rapforge import nets
from rapforge import train as T
from rapforge.perturb import PerturbationBudget, adversarial, gaussian_noise_baseline

LR, BATCH, EPOCHS = 3e-3, 16, 5


def synth(name, seed, size, subset=None):
    return D.synth_domain(D.DomainSpec("synthetic", name, seed, size, {"subset": subset} if subset else {}))


def fit(arch, data):
    clf = nets.build_classifier(arch, 0)
    stats = T.train_classifier(clf, D.split(data, (0.9, 0.1, 0.0), seed=0), epochs=3, lr=2e-3)
    print(f"{arch} on {data.domain}: {stats}")
    return clf.freeze()


def attack(clf, data, loss, eps, seed=0, epochs=EPOCHS):
    cfg = T.TrainConfig(loss_kind=L.parse_loss_kind(loss), budget=PerturbationBudget(eps), epochs=epochs,
                        batch_size=BATCH, lr=LR, seed=seed)
    t0 = time.perf_counter()
    res = T.train_generator(nets.build_generator("resgen-s", seed), clf, data, cfg,
                            on_epoch=lambda r: print("  ", {k: round(v, 2) for k, v in r.items()}))
    print(f"   {loss} eps={eps:.4f}: {time.perf_counter() - t0:.0f}s")
    return res.generator, cfg


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("stage", choices=["classifiers", "white-box", "transfer", "targeted", "cross-domain"])
    stage = ap.parse_args().stage

    test = synth("digits", 1, 1000, "test")
    a = fit("convnet-s", synth("digits", 0, 10_000, "train"))
    print("A held-out top-1:", 100.0 * (a.predict(test.images) == test.labels).mean())
    if stage == "classifiers":
        return
    if stage == "white-box":
        for eps, size in ((0.3, 3000), (10 / 255, 8000), (10 / 255, 12000)):
            gen, cfg = attack(a, synth("digits", 100, size, "train"), "rce", eps)
            print("held-out fool rate:", T.fool_rate_np(a, test.images, adversarial(gen, test.images, cfg.budget)))
    elif stage == "transfer":
        b = fit("convnet-m", synth("digits", 0, 6000, "train"))
        for seed in range(5):
            row = {}
            for loss in ("rce", "ce"):
                gen, cfg = attack(a, synth("digits", 100 + seed, 2000, "train"), loss, 16 / 255, seed, epochs=3)
                adv = adversarial(gen, test.images, cfg.budget)
                row[loss] = (T.fool_rate_np(a, test.images, adv), T.fool_rate_np(b, test.images, adv))
            print(f"seed {seed} (white-box, black-box): {row}, black-box diff {row['rce'][1] - row['ce'][1]:+.1f}")
    elif stage == "targeted":
        gen, cfg = attack(a, synth("digits", 100, 3000, "train"), "targeted:3", 0.3)
        print("held-out target rate:", T.target_rate_np(a, test.images, adversarial(gen, test.images, cfg.budget), 3))
    elif stage == "cross-domain":
        g = fit("convnet-m", synth("glyphs", 0, 6000))
        gtest = synth("glyphs", 1, 1000)
        print("glyph held-out top-1:", 100.0 * (g.predict(gtest.images) == gtest.labels).mean())
        gen, cfg = attack(a, synth("stripes", 100, 3000), "rce", 16 / 255)
        adv = adversarial(gen, gtest.images, cfg.budget)
        noise = gaussian_noise_baseline(gtest.images, cfg.budget, 0)
        print("generator:", T.fool_rate_np(g, gtest.images, adv), "noise:", T.fool_rate_np(g, gtest.images, noise))


if __name__ == "__main__":
    main()
