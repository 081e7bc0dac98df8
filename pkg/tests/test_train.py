import json

import numpy as np
import pytest

from rapforge import data as D
from rapforge import diffcore as dc
from rapforge import losses as L
from rapforge import nets
from rapforge import train as T
from rapforge.perturb import PerturbationBudget, adversarial, gaussian_kernel


# ---------------------------------------------------------------- Adam


def test_adam_one_step_hand_computed():
    p = np.zeros(1)
    state = T.AdamState()
    T.adam_step([p], [np.ones(1)], state, lr=0.1, beta1=0.5, beta2=0.999)
    # m_hat = v_hat = 1 after bias correction
    assert p[0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)
    assert state.t == 1


def test_adam_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(6)]
    mine, state = p0.copy(), T.AdamState()
    tp = torch.tensor(p0.copy(), requires_grad=True)
    opt = torch.optim.Adam([tp], lr=1e-2, betas=(0.5, 0.999), eps=1e-8)
    for g in grads:
        T.adam_step([mine], [g], state, 1e-2, 0.5, 0.999)
        opt.zero_grad()
        tp.grad = torch.tensor(g)
        opt.step()
    np.testing.assert_allclose(mine, tp.detach().numpy(), atol=1e-12)


def test_adam_zero_gradient_leaves_param():
    p = np.array([0.3, -0.2])
    state = T.AdamState()
    T.adam_step([p], [np.zeros(2)], state, lr=0.1)
    T.adam_step([p], [None], state, lr=0.1)
    np.testing.assert_array_equal(p, [0.3, -0.2])
    assert state.t == 2


def test_adam_is_deterministic():
    def run():
        p, s = np.ones(4), T.AdamState()
        for k in range(5):
            T.adam_step([p], [np.sin(np.arange(4.0) + k)], s, 1e-2)
        return p

    assert run().tobytes() == run().tobytes()


def test_adam_shape_mismatch():
    with pytest.raises(Exception):
        T.adam_step([np.zeros(2)], [np.zeros(3)], T.AdamState(), 0.1)


# ---------------------------------------------------------------- config


def test_config_validation_and_json_roundtrip():
    with pytest.raises(T.ConfigError):
        T.TrainConfig(epochs=0)
    with pytest.raises(T.ConfigError):
        T.TrainConfig(lr=0.0)
    with pytest.raises(T.ConfigError):
        T.TrainConfig(beta1=1.0)
    cfg = T.TrainConfig(loss_kind=L.Targeted(3), smoothing=gaussian_kernel(3, 1.0),
                        early_stop=T.EarlyStop(patience=3), seed=4)
    back = T.TrainConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back.to_json() == cfg.to_json()


def test_default_optimizer_settings():
    cfg = T.TrainConfig()
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.batch_size) == (1e-4, 0.5, 0.999, 32)


# ---------------------------------------------------------------- training loop


def _unlabeled(handle):
    return D.DatasetHandle(handle.name + "-nolabels", handle.images, None, {}, handle.domain)


def test_rce_loss_rises_within_one_epoch(small_classifier, digits_small):
    # 64 training samples, default optimizer settings; the objective is ascended,
    # so the first batch scores higher under the end-of-epoch generator
    rises = 0
    for seed in range(10):
        data = D.DatasetHandle("d", digits_small.images[seed * 72:(seed + 1) * 72], None)
        data = D.split(data, (64 / 72, 8 / 72, 0.0), seed=seed)
        gen = nets.build_generator("resgen-s", seed)
        cfg = T.TrainConfig(loss_kind=L.RCEUntargeted(), epochs=1, seed=seed)
        rec = T.train_generator(gen, small_classifier, data, cfg).history[0]
        rises += rec["loss_end"] > rec["loss_first"]
    assert rises >= 10 * 0.95


def test_one_batch_overfit_reaches_full_fooling(small_classifier, digits_small):
    x = digits_small.images[:8]
    y = small_classifier.predict(x)
    gen = nets.build_generator("resgen-s", 0)
    cfg = T.TrainConfig(loss_kind=L.RCEUntargeted(), budget=PerturbationBudget(0.3), lr=1e-3)
    params, state = gen.parameters(), T.AdamState()
    clean = small_classifier.logits(x)
    fooled = 0.0
    for step in range(500):
        loss = T.generator_loss(gen, small_classifier, x, y, cfg, clean)
        gen.zero_grad()
        dc.backward(loss * -1.0)
        T.adam_step(params, [p.grad for p in params], state, cfg.lr, cfg.beta1, cfg.beta2)
        if step % 25 == 24:
            fooled = T.fool_rate_np(small_classifier, x, adversarial(gen, x, cfg.budget))
            if fooled == 100.0:
                break
    assert fooled == 100.0


def test_frozen_classifier_untouched(small_classifier, digits_small):
    before = [p.data.tobytes() for p in small_classifier.parameters()]
    data = D.DatasetHandle("d", digits_small.images[:40], None)
    T.train_generator(nets.build_generator("resgen-s", 0), small_classifier, data,
                      T.TrainConfig(epochs=1, batch_size=16))
    assert before == [p.data.tobytes() for p in small_classifier.parameters()]


def test_unfrozen_classifier_rejected(digits_small):
    with pytest.raises(T.ConfigError):
        T.train_generator(nets.build_generator("resgen-s", 0), nets.build_classifier("convnet-s", 0),
                          digits_small, T.TrainConfig(epochs=1))


def test_label_modes(small_classifier, digits_small):
    data = _unlabeled(D.DatasetHandle("d", digits_small.images[:40], None))
    res = T.train_generator(nets.build_generator("resgen-s", 0), small_classifier, data,
                            T.TrainConfig(epochs=1, batch_size=16))
    assert len(res.history) == 1
    with pytest.raises(T.ConfigError):
        T.train_generator(nets.build_generator("resgen-s", 0), small_classifier, data,
                          T.TrainConfig(epochs=1, label_mode="ground_truth"))


def test_shape_mismatch_rejected(small_classifier):
    data = D.DatasetHandle("d", np.zeros((10, 1, 32, 32)), None)
    with pytest.raises(T.ConfigError):
        T.train_generator(nets.build_generator("resgen-s", 0), small_classifier, data, T.TrainConfig(epochs=1))


def test_nan_loss_aborts_with_location(small_classifier, digits_small, monkeypatch):
    data = D.DatasetHandle("d", digits_small.images[:40], None)
    real = T.generator_loss

    def poisoned(*a, **k):
        out = real(*a, **k)
        out.data = np.array(np.nan)
        return out

    monkeypatch.setattr(T, "generator_loss", poisoned)
    with pytest.raises(T.NaNLossError, match="epoch 1, batch 0"):
        T.train_generator(nets.build_generator("resgen-s", 0), small_classifier, data, T.TrainConfig(epochs=1))


def test_targeted_history_and_filtering(small_classifier, digits_small):
    data = D.DatasetHandle("d", digits_small.images[:60], None)
    res = T.train_generator(nets.build_generator("resgen-s", 0), small_classifier, data,
                            T.TrainConfig(loss_kind=L.Targeted(3), epochs=1, batch_size=16,
                                          budget=PerturbationBudget(0.3)))
    assert "val_target_rate" in res.history[0]


# ---------------------------------------------------------------- checkpoints and resume


def _tiny(digits_small):
    return D.DatasetHandle("d", digits_small.images[:48], None)


def test_checkpoints_written_per_epoch(small_classifier, digits_small, tmp_path):
    cfg = T.TrainConfig(epochs=2, batch_size=16)
    res = T.train_generator(nets.build_generator("resgen-s", 0), small_classifier, _tiny(digits_small), cfg,
                            out_dir=tmp_path)
    assert [c.epoch for c in res.checkpoints] == [1, 2]
    ck = T.Checkpoint.load(tmp_path / "epoch_002")
    assert ck.epoch == 2 and len(ck.history) == 2
    assert ck.config == cfg.to_json()


def test_resume_matches_continuous_run(small_classifier, digits_small, tmp_path):
    data = _tiny(digits_small)
    full = T.train_generator(nets.build_generator("resgen-s", 0), small_classifier, data,
                             T.TrainConfig(epochs=2, batch_size=16))
    T.train_generator(nets.build_generator("resgen-s", 0), small_classifier, data,
                      T.TrainConfig(epochs=1, batch_size=16), out_dir=tmp_path)
    resumed = T.resume(tmp_path / "epoch_001", small_classifier, data, T.TrainConfig(epochs=2, batch_size=16))
    for p, q in zip(full.generator.parameters(), resumed.generator.parameters()):
        np.testing.assert_allclose(p.data, q.data, atol=1e-10, rtol=0)
    assert resumed.history[-1]["val_fool_rate"] == pytest.approx(full.history[-1]["val_fool_rate"], abs=1e-10)


def test_resume_config_mismatch(small_classifier, digits_small, tmp_path):
    data = _tiny(digits_small)
    T.train_generator(nets.build_generator("resgen-s", 0), small_classifier, data,
                      T.TrainConfig(epochs=1, batch_size=16), out_dir=tmp_path)
    with pytest.raises(T.ConfigError, match="batch_size"):
        T.resume(tmp_path / "epoch_001", small_classifier, data, T.TrainConfig(epochs=2, batch_size=8))


def test_resume_from_corrupted_checkpoint(small_classifier, digits_small, tmp_path):
    data = _tiny(digits_small)
    T.train_generator(nets.build_generator("resgen-s", 0), small_classifier, data,
                      T.TrainConfig(epochs=1, batch_size=16), out_dir=tmp_path)
    path = tmp_path / "epoch_001" / "generator.rapw"
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(nets.ChecksumError):
        T.resume(tmp_path / "epoch_001", small_classifier, data, T.TrainConfig(epochs=2, batch_size=16))


def test_early_stop_restores_best_epoch(small_classifier, digits_small, monkeypatch):
    rates = iter([40.0, 55.0, 50.0, 45.0, 60.0])
    monkeypatch.setattr(T, "fool_rate_np", lambda *a: next(rates))
    res = T.train_generator(nets.build_generator("resgen-s", 0), small_classifier, _tiny(digits_small),
                            T.TrainConfig(epochs=5, batch_size=16, early_stop=T.EarlyStop(patience=2)))
    assert [r["epoch"] for r in res.history] == [1, 2, 3, 4]
    assert res.best_epoch == 2


# ---------------------------------------------------------------- classifier pretraining


def test_train_classifier_reports_epochs(digits_small):
    log = []
    clf = nets.build_classifier("convnet-s", 1)
    stats = T.train_classifier(clf, D.DatasetHandle("d", digits_small.images[:200], digits_small.labels[:200]),
                               epochs=2, on_epoch=log.append)
    assert [r["epoch"] for r in log] == [1, 2]
    assert all(np.isfinite(r["train_loss"]) for r in log)
    assert 0.0 <= stats["val_acc"] <= 100.0


def test_train_classifier_needs_labels(digits_small):
    with pytest.raises(T.ConfigError):
        T.train_classifier(nets.build_classifier("convnet-s", 0), _unlabeled(digits_small))
