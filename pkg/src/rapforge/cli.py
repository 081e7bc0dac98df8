"""``rapforge`` command line: classifier pretraining, generator training, attack, eval, gradlab.

Every command reads one JSON experiment config and writes its artifacts
under the config's ``out_dir``. Exit codes: 0 success, 2 config error,
3 runtime error, 4 budget-audit failure. ``RAPFORGE_SEED`` overrides the
config's top-level seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import data as D
from . import evaluate as E
from . import losses as L
from . import nets
from . import train as T
from .perturb import PerturbationBudget, adversarial, gaussian_kernel

log = logging.getLogger("rapforge")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_AUDIT = 0, 2, 3, 4


class CLIConfigError(Exception):
    pass


class AuditError(Exception):
    pass


_DATA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["id", "kind"],
    "properties": {
        "id": {"type": "string"},
        "kind": {"enum": ["synthetic", "idx_files", "image_dir"]},
        "name": {"type": "string"},
        "seed": {"type": "integer"},
        "size": {"type": "integer", "minimum": 1},
        "params": {"type": "object"},
    },
}
_CLASSIFIER = {
    "type": "object",
    "additionalProperties": False,
    "required": ["id", "arch", "data"],
    "properties": {
        "id": {"type": "string"},
        "arch": {"type": "string"},
        "data": {"type": "string"},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
    },
}
_GENERATOR = {
    "type": "object",
    "additionalProperties": False,
    "required": ["classifier", "data"],
    "properties": {
        "id": {"type": "string"},
        "arch": {"type": "string"},
        "classifier": {"type": "string"},
        "data": {"type": "string"},
        "loss": {"type": "string"},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "smoothing": {"type": "boolean"},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "label_mode": {"enum": ["clean_prediction", "ground_truth"]},
        "early_stop": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "properties": {"metric": {"type": "string"}, "patience": {"type": "integer", "minimum": 1}},
        },
        "seed": {"type": "integer"},
        "max_train": {"type": ["integer", "null"], "minimum": 1},
    },
}
_EVAL = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {"type": "string"},
        "targets": {"type": "array", "items": {"type": "string"}},
        "target_data": {"type": "object", "additionalProperties": {"type": "string"}},
        "generators": {"type": "array", "items": {"type": "string"}},
        "epsilons": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "samples": {"type": "integer", "minimum": 1},
    },
}
SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["out_dir"],
    "properties": {
        "out_dir": {"type": "string"},
        "seed": {"type": "integer"},
        "data": {"type": "array", "items": _DATA},
        "classifiers": {"type": "array", "items": _CLASSIFIER},
        "generator": _GENERATOR,
        "eval": _EVAL,
    },
}


# --------------------------------------------------------------------------
# config handling


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CLIConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CLIConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CLIConfigError(f"config invalid at {where}: {exc.message}") from exc
    env = os.environ.get("RAPFORGE_SEED")
    if env is not None:
        try:
            cfg["seed"] = int(env)
        except ValueError as exc:
            raise CLIConfigError(f"RAPFORGE_SEED must be an integer, got {env!r}") from exc
    cfg.setdefault("seed", 0)
    base = Path(path).resolve().parent
    out = Path(cfg["out_dir"])
    cfg["out_dir"] = str(out if out.is_absolute() else base / out)
    cfg["_base"] = str(base)
    return cfg


def _find(items, key, what):
    for item in items or []:
        if item["id"] == key:
            return item
    raise CLIConfigError(f"{what} {key!r} not declared in config")


def _dataset(cfg, data_id) -> D.DatasetHandle:
    d = _find(cfg.get("data"), data_id, "dataset")
    params = dict(d.get("params", {}))
    for key in ("images", "labels", "root"):
        if key in params and not Path(params[key]).is_absolute():
            params[key] = str(Path(cfg["_base"]) / params[key])
    spec = D.DomainSpec(d["kind"], d.get("name", d["id"]), d.get("seed", cfg["seed"]), d.get("size", 1000), params)
    handle = D.materialize(spec)
    return handle


def _classifier_path(cfg, cid) -> Path:
    return Path(cfg["out_dir"]) / "classifiers" / f"{cid}.rapw"


def _load_classifier(cfg, cid) -> tuple[nets.ClassifierNet, dict]:
    path = _classifier_path(cfg, cid)
    if not path.exists():
        raise FileNotFoundError(f"classifier weights not found: {path} (run train-classifier --name {cid})")
    clf = nets.load_weights(path).freeze()
    return clf, nets.read_weight_meta(path).get("extra", {})


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands


def cmd_train_classifier(cfg: dict, name: str) -> Path:
    spec = _find(cfg.get("classifiers"), name, "classifier")
    ds = _dataset(cfg, spec["data"])
    if not ds.labeled:
        raise CLIConfigError(f"dataset {spec['data']!r} is unlabeled; classifiers need labels")
    seed = spec.get("seed", cfg["seed"])
    ds = D.split(ds, (0.9, 0.1, 0.0), seed=seed)
    clf = nets.build_classifier(spec["arch"], seed, ds.image_shape, int(ds.labels.max()) + 1)
    epoch_log = []
    stats = T.train_classifier(clf, ds, epochs=spec.get("epochs", 3), batch_size=spec.get("batch_size", 32),
                               lr=spec.get("lr", 2e-3), seed=seed, on_epoch=epoch_log.append)
    out = Path(cfg["out_dir"]) / "classifiers"
    out.mkdir(parents=True, exist_ok=True)
    meta = {"id": name, "dataset": spec["data"], "domain": ds.domain, "seed": seed, **stats}
    nets.save_weights(clf, out / f"{name}.rapw", extra_meta=meta)
    _write_json(out / f"{name}.json", meta)
    _write_csv(out / f"{name}_log.csv", ["epoch", "train_loss"],
               [[r["epoch"], f"{r['train_loss']:.8f}"] for r in epoch_log])
    print(f"classifier {name}: val top-1 {stats['val_acc']:.2f}%")
    return out / f"{name}.rapw"


def _train_config(g: dict, seed: int, loss: str | None, gs: bool) -> T.TrainConfig:
    es = g.get("early_stop")
    return T.TrainConfig(
        loss_kind=L.parse_loss_kind(loss or g.get("loss", "rce")),
        budget=PerturbationBudget.from_255(g.get("epsilon", 10)),
        smoothing=gaussian_kernel(3, 1.0) if (gs or g.get("smoothing", False)) else None,
        epochs=g.get("epochs", 5), batch_size=g.get("batch_size", 32), lr=g.get("lr", 1e-4),
        beta1=g.get("beta1", 0.5), beta2=g.get("beta2", 0.999), seed=g.get("seed", seed),
        label_mode=g.get("label_mode", "clean_prediction"),
        early_stop=None if es is None else T.EarlyStop(**es),
        max_train=g.get("max_train"),
    )


def cmd_train_generator(cfg: dict, loss: str | None = None, gs: bool = False, name: str | None = None) -> Path:
    g = cfg.get("generator")
    if g is None:
        raise CLIConfigError("config has no generator section")
    try:
        tcfg = _train_config(g, cfg["seed"], loss, gs)
    except ValueError as exc:
        raise CLIConfigError(str(exc)) from exc
    clf, clf_meta = _load_classifier(cfg, g["classifier"])
    ds = _dataset(cfg, g["data"])
    gen = nets.build_generator(g.get("arch", "resgen-s"), tcfg.seed, ds.image_shape)
    gid = name or g.get("id") or f"gen-{L.loss_kind_tag(tcfg.loss_kind).replace(':', '')}{'-gs' if tcfg.smoothing else ''}"
    out = Path(cfg["out_dir"]) / "generators" / gid
    out.mkdir(parents=True, exist_ok=True)
    provenance = {"id": gid, "trained_against": g["classifier"], "train_domain": ds.domain,
                  "loss": L.loss_kind_tag(tcfg.loss_kind), "clf_domain": clf_meta.get("domain", "")}
    res = T.train_generator(gen, clf, ds, tcfg, out_dir=out, provenance=provenance)
    nets.save_weights(res.generator, out / "generator.rapw",
                      extra_meta={"smoothing": tcfg.to_json()["smoothing"], **provenance,
                                  "best_epoch": res.best_epoch})
    _write_csv(out / "metrics.csv", ["epoch", "loss", "white_box_fool_rate"],
               [[r["epoch"], f"{r['loss']:.8f}", f"{r['val_fool_rate']:.4f}"] for r in res.history])
    print(f"generator {gid}: final white-box val fool rate {res.history[-1]['val_fool_rate']:.2f}%")
    return out


def _gen_smoothing(path) -> object:
    sm = nets.read_weight_meta(path).get("extra", {}).get("smoothing")
    return None if sm is None else gaussian_kernel(sm["size"], sm["sigma"])


def _png(path: Path, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    # fixed PNG encoder settings keep reruns byte-identical
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def cmd_attack(cfg: dict, generator: str, dataset: str, epsilon: float, out: str) -> dict:
    gpath = Path(generator)
    if not gpath.is_absolute() and not gpath.exists():
        gpath = Path(cfg["_base"]) / gpath
    if not gpath.exists():
        raise FileNotFoundError(f"generator weights not found: {gpath}")
    gen = nets.load_weights(gpath)
    ds = _dataset(cfg, dataset)
    budget = PerturbationBudget.from_255(epsilon)
    adv = adversarial(gen, ds.images, budget, _gen_smoothing(gpath))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    q_clean = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.int64)
    q_adv = np.clip(np.rint(adv * 255.0), 0, 255).astype(np.int64)
    dev = np.abs(q_adv - q_clean).reshape(len(adv), -1).max(axis=1)
    limit = int(round(epsilon))
    bad = np.nonzero(dev > limit)[0]
    if len(bad):
        raise AuditError(f"budget audit failed at index {int(bad[0])}: deviation {int(dev[bad[0]])} > {limit}")
    for i in range(len(adv)):
        _png(out_dir / f"clean_{i:05d}.png", ds.images[i])
        _png(out_dir / f"adv_{i:05d}.png", adv[i])
    audit = {"n": int(len(adv)), "epsilon_255": float(epsilon), "max_deviation_255": int(dev.max()) if len(dev) else 0,
             "limit_255": limit, "passed": True}
    line = f"budget audit: max |adv - clean| = {audit['max_deviation_255']} <= {limit} (0-255 units) over {len(adv)} images"
    (out_dir / "audit.txt").write_text(line + "\n", encoding="utf-8")
    print(line)
    return audit


def _generator_entries(cfg, ids):
    entries, metas = [], {}
    for gid in ids:
        path = Path(gid)
        if not path.suffix:
            path = Path(cfg["out_dir"]) / "generators" / gid / "generator.rapw"
        elif not path.is_absolute():
            path = Path(cfg["_base"]) / path
        if not path.exists():
            raise FileNotFoundError(f"generator weights not found: {path}")
        meta = nets.read_weight_meta(path).get("extra", {})
        name = meta.get("id", path.parent.name)
        entries.append(E.GeneratorEntry(name, nets.load_weights(path), meta.get("trained_against", ""),
                                        meta.get("train_domain", ""), _gen_smoothing(path)))
        metas[name] = meta
    return entries, metas


def _summary(matrices, metas) -> str:
    lines = ["# Transfer summary", "", "Fool rate (%) per cell; `*` marks a white-box cell.", ""]
    for eps, m in matrices:
        lines.append(f"## epsilon = {eps * 255:.0f}/255")
        lines.append("")
        lines.append("| generator | " + " | ".join(m.cols) + " |")
        lines.append("|---" * (len(m.cols) + 1) + "|")
        for r in m.rows:
            cells = []
            for c in m.cols:
                rep = m.cells.get((r, c))
                if rep is None or rep.error:
                    cells.append("error")
                else:
                    star = "*" if rep.threat_model == E.WHITE_BOX else ""
                    cells.append(f"{rep.fool_rate:.2f}{star}")
            lines.append(f"| {r} | " + " | ".join(cells) + " |")
        lines.append("")
        lines.append("Generator minus Gaussian-noise baseline (points):")
        lines.append("")
        for r in m.rows:
            if r == E.NOISE_ID:
                continue
            deltas = []
            for c in m.cols:
                rep, base = m.cells.get((r, c)), m.cells.get((E.NOISE_ID, c))
                if rep is not None and base is not None and not rep.error:
                    deltas.append(f"{c}: {rep.fool_rate - base.fool_rate:+.2f}")
            lines.append(f"- {r}: " + ", ".join(deltas))
        pairs = []
        for r in m.rows:
            meta = metas.get(r, {})
            if meta.get("loss") != "rce":
                continue
            for o in m.rows:
                om = metas.get(o, {})
                if (om.get("loss") == "ce" and om.get("trained_against") == meta.get("trained_against")
                        and om.get("train_domain") == meta.get("train_domain")):
                    pairs.append((r, o))
        if pairs:
            lines.append("")
            lines.append("RCE minus CE (points):")
            lines.append("")
            for r, o in pairs:
                deltas = [f"{c}: {m.cells[(r, c)].fool_rate - m.cells[(o, c)].fool_rate:+.2f}" for c in m.cols]
                lines.append(f"- {r} vs {o}: " + ", ".join(deltas))
        lines.append("")
    return "\n".join(lines)


def cmd_eval(cfg: dict, matrix: str | None = None) -> Path:
    ev = cfg.get("eval")
    if matrix:
        ev = load_config(matrix).get("eval")
    if not ev or "data" not in ev or not ev.get("targets") or not ev.get("generators"):
        raise CLIConfigError("eval section needs data, targets and generators")
    gens, metas = _generator_entries(cfg, ev["generators"])
    clfs = []
    for cid in ev["targets"]:
        clf, meta = _load_classifier(cfg, cid)
        clfs.append(E.ClassifierEntry(cid, clf, meta.get("domain", "")))
    base = _dataset(cfg, ev["data"])
    per_target = {cid: _dataset(cfg, did) for cid, did in ev.get("target_data", {}).items()}
    matrices, reports = [], []
    for eps in ev.get("epsilons", [10]):
        m = E.run_transfer_matrix(gens, clfs, base, PerturbationBudget.from_255(eps), n_samples=ev.get("samples"),
                                  seed=cfg["seed"], include_noise=True, datasets=per_target)
        matrices.append((eps / 255.0, m))
        reports.extend(m.reports())
    out = Path(cfg["out_dir"]) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "transfer_matrix.csv").write_text(E.reports_to_csv(reports), encoding="utf-8")
    (out / "summary.md").write_text(_summary(matrices, metas), encoding="utf-8")
    failed = [r for r in reports if r.error]
    for r in failed:
        log.error("cell %s x %s failed: %s", r.generator, r.classifier, r.error)
    print(f"wrote {out / 'transfer_matrix.csv'} ({len(reports)} rows, {len(failed)} failed cells)")
    return out


GRADLAB_HEADER = ["kind", "index", "ce_loss", "rce_loss", "ce_grad_norm", "rce_grad_norm",
                  "precondition_held", "dominant", "dominant_y"]


def cmd_gradlab(cfg: dict, trials: int, margin: float, classes: int = 10, steps: int = 10) -> Path:
    if trials < 1:
        raise CLIConfigError("--trials must be >= 1")
    rng = np.random.default_rng(cfg["seed"])
    # half the draws meet the precondition by construction, half are unconstrained
    n_pre = (trials + 1) // 2
    a1, ap1, y1 = L.sample_precondition_pairs(n_pre, classes, rng, margin=margin)
    y2 = rng.integers(0, classes, size=trials - n_pre)
    a2 = rng.uniform(-5, 5, size=(trials - n_pre, classes))
    ap2 = rng.uniform(-5, 5, size=(trials - n_pre, classes))
    a, ap, y = np.vstack([a1, a2]), np.vstack([ap1, ap2]), np.concatenate([y1, y2])
    pair = L.LogitPair(a, ap, y)
    reports = L.dominance_check(pair, margin=margin)
    rows = []
    for i, rep in enumerate(reports):
        ce = float(L.ce_loss(ap[i:i + 1], y[i:i + 1]).item())
        rce = float(L.rce_loss(L.LogitPair(a[i:i + 1], ap[i:i + 1], y[i:i + 1])).item())
        rows.append(["trial", i, f"{ce:.10g}", f"{rce:.10g}", f"{rep.ce_norm:.10g}", f"{rep.rce_norm:.10g}",
                     int(rep.precondition_held), int(rep.dominant), int(rep.dominant_y)])
    for t in L.ascent_trajectory(steps=steps, num_classes=classes, seed=cfg["seed"]):
        rows.append(["trajectory", t["step"], f"{t['ce_loss']:.10g}", f"{t['rce_loss']:.10g}",
                     f"{t['ce_grad_norm']:.10g}", f"{t['rce_grad_norm']:.10g}", "", "", ""])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "gradlab.csv", GRADLAB_HEADER, rows)
    held = [r for r in reports if r.precondition_held]
    frac = 100.0 * sum(r.dominant for r in held) / max(1, len(held))
    print(f"gradlab: {len(held)} of {trials} trials meet the precondition; l2 dominance in {frac:.2f}% of them")
    return out / "gradlab.csv"


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rapforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-classifier", help="pretrain a victim classifier")
    s.add_argument("--config", required=True)
    s.add_argument("--name", required=True)

    s = sub.add_parser("train-generator", help="train a perturbation generator")
    s.add_argument("--config", required=True)
    s.add_argument("--loss", help="ce | rce | targeted:K (overrides config)")
    s.add_argument("--gs", action="store_true", help="Gaussian smoothing (3x3, sigma 1) before projection")
    s.add_argument("--name")

    s = sub.add_parser("attack", help="write adversarial PNGs with a budget audit")
    s.add_argument("--config", required=True)
    s.add_argument("--generator", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--epsilon", type=float, required=True, help="budget in 0-255 pixel units")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="transfer matrix and summary")
    s.add_argument("--config", required=True)
    s.add_argument("--matrix", help="alternate config whose eval section is used")

    s = sub.add_parser("gradlab", help="CE vs RCE gradient statistics")
    s.add_argument("--config", required=True)
    s.add_argument("--trials", type=int, default=10000)
    s.add_argument("--margin", type=float, default=1.0)
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--steps", type=int, default=10)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "train-classifier":
            cmd_train_classifier(cfg, args.name)
        elif args.command == "train-generator":
            cmd_train_generator(cfg, args.loss, args.gs, args.name)
        elif args.command == "attack":
            cmd_attack(cfg, args.generator, args.dataset, args.epsilon, args.out)
        elif args.command == "eval":
            cmd_eval(cfg, args.matrix)
        elif args.command == "gradlab":
            cmd_gradlab(cfg, args.trials, args.margin, args.classes, args.steps)
    except (CLIConfigError, T.ConfigError, D.DataError, nets.UnknownArchitectureError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AuditError as exc:
        print(f"audit failure: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
