"""Experiment runner: train, evaluate, ablate, project, openset.

One JSON config describes the experiment; flags only pick the command,
paths, seed, and partitioner. Every run writes a config echo with the
resolved settings and the package version, and with a fixed config and
seed every output file is byte-identical across runs.

Exit codes: 0 success, 2 config or validation problem, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import __version__, data, embedder, metrics, openset, projection
from .container import ContainerError
from .losses import LossConfig
from .partition import (EmbeddingSpace, PartitionError, fit_gmm,
                        fit_linear_svm, fit_logistic, fit_mlp_head,
                        gmm_assign_batch, knn_classify, knn_classify_batch,
                        predict_logistic, predict_mlp, predict_svm)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

PARTITIONERS = ("knn", "lr", "svm", "mlp", "gmm")

LOSS_SWEEP = (("hybrid", "hybrid"), ("sm+tl", "hybrid_tl"), ("rtl", "rtl"),
              ("tl", "triplet"), ("sm", "softmax"))
AUGMENT_SWEEP = (("R+S+G", ("R", "S", "G")), ("R", ("R",)), ("S", ("S",)),
                 ("G", ("G",)), ("none", ()))


class ConfigError(ValueError):
    """Bad or missing experiment configuration."""


def _take(section: dict, allowed, where: str) -> dict:
    extra = sorted(set(section) - set(allowed))
    if extra:
        raise ConfigError(f"unknown keys {extra} in {where}")
    return section


def _pct(x: float) -> str:
    return f"{100.0 * x:.1f}"


# ---------------------------------------------------------------------------
# config loading


@dataclass
class RunContext:
    command: str
    echo: dict
    seed: int
    out_dir: Path
    dataset: data.Dataset
    train_set: data.Dataset
    test_set: data.Dataset
    model_cfg: embedder.ModelConfig
    train_cfg: embedder.TrainConfig
    partitioner: dict
    tsne: dict
    openset_cfg: dict
    ablate_cfg: dict
    raw_dataset: dict = field(default_factory=dict)
    shared_model: embedder.Model | None = None


def _build_dataset(section: dict, seed: int) -> data.Dataset:
    kind = section.get("kind")
    if kind == "blobs":
        _take(section, ("kind", "class_count", "per_class", "dim",
                        "separation"), "dataset")
        return data.gen_blobs(class_count=int(section.get("class_count", 5)),
                              per_class=int(section.get("per_class", 200)),
                              dim=int(section.get("dim", 10)),
                              separation=float(section.get("separation", 10.0)),
                              seed=seed)
    if kind == "glyphs":
        _take(section, ("kind", "class_count", "per_class", "size", "jitter"),
              "dataset")
        return data.gen_glyphs(class_count=int(section.get("class_count", 8)),
                               per_class=int(section.get("per_class", 150)),
                               size=int(section.get("size", 32)),
                               seed=seed,
                               jitter=float(section.get("jitter", 0.02)))
    if kind == "manifest":
        _take(section, ("kind", "path"), "dataset")
        if "path" not in section:
            raise ConfigError("manifest dataset needs a path")
        path = Path(section["path"])
        if not path.exists():
            raise ConfigError(f"manifest not found: {path}")
        return data.load_dataset(path)
    raise ConfigError(f"dataset.kind must be blobs, glyphs or manifest, "
                      f"got {kind!r}")


def _train_config(section: dict, seed: int) -> embedder.TrainConfig:
    _take(section, ("loss_kind", "epochs", "learning_rate", "batch_p",
                    "batch_k", "margin_alpha", "lambda_mix", "rtl_epsilon",
                    "augment_ops"), "train")
    loss = LossConfig(
        margin_alpha=float(section.get("margin_alpha", 0.5)),
        lambda_mix=float(section.get("lambda_mix", 0.01)),
        rtl_epsilon=float(section.get("rtl_epsilon", 1e-8)))
    return embedder.TrainConfig(
        loss_kind=section.get("loss_kind", "hybrid"),
        seed=seed,
        epochs=int(section.get("epochs", 100)),
        learning_rate=float(section.get("learning_rate", 0.01)),
        batch_p=int(section.get("batch_p", 8)),
        batch_k=int(section.get("batch_k", 4)),
        loss=loss,
        augment_ops=tuple(section.get("augment_ops", ())))


def load_context(args) -> RunContext:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise ConfigError(f"config not found: {cfg_path}")
    try:
        raw = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _take(raw, ("seed", "out_dir", "dataset", "split", "model", "train",
                "partitioner", "tsne", "openset", "ablate"), "config")

    seed = args.seed if args.seed is not None else raw.get("seed")
    if seed is None:
        raise ConfigError("seed is required (config key or --seed)")
    seed = int(seed)

    out = args.out or raw.get("out_dir")
    if not out:
        raise ConfigError("output directory required (config key or --out)")
    out_dir = Path(out)

    if "dataset" not in raw:
        raise ConfigError("config needs a dataset section")
    dataset = _build_dataset(dict(raw["dataset"]), seed)

    split_raw = dict(raw.get("split", {}))
    _take(split_raw, ("kind", "test_fraction"), "split")
    if split_raw.get("kind", "holdout") != "holdout":
        raise ConfigError("only holdout splits are supported here")
    split_spec = data.SplitSpec(
        kind="holdout",
        test_fraction=float(split_raw.get("test_fraction", 0.2)),
        seed=seed)
    pair = data.split(dataset, split_spec)
    train_set = dataset.subset(pair.train)
    test_set = dataset.subset(pair.test)

    train_cfg = _train_config(dict(raw.get("train", {})), seed)
    if not dataset.is_images:
        bad = set(train_cfg.augment_ops) & {"R", "S"}
        if bad:
            raise ConfigError(f"augment ops {sorted(bad)} need image data")

    model_raw = dict(raw.get("model", {}))
    _take(model_raw, ("embedding_dim", "architecture"), "model")
    input_shape = (dataset.samples.shape[1:] if dataset.is_images
                   else dataset.samples.shape[1])
    arch = model_raw.get("architecture")
    model_cfg = embedder.ModelConfig(
        input_shape=input_shape,
        embedding_dim=int(model_raw.get("embedding_dim", 128)),
        num_classes=dataset.class_count,
        architecture=(tuple(tuple(layer) for layer in arch)
                      if arch is not None else None))

    part = dict(raw.get("partitioner", {}))
    _take(part, ("kind", "k", "max_iterations", "c", "iterations", "hidden",
                 "epochs", "learning_rate", "batch_size"), "partitioner")
    part.setdefault("kind", "knn")
    if args.partitioner:
        part["kind"] = args.partitioner
    if args.k is not None:
        part["k"] = args.k
    if part["kind"] not in PARTITIONERS:
        raise ConfigError(f"unknown partitioner {part['kind']!r}")

    tsne = dict(raw.get("tsne", {}))
    _take(tsne, ("perplexity", "iterations", "learning_rate",
                 "early_exaggeration"), "tsne")

    os_raw = dict(raw.get("openset", {}))
    _take(os_raw, ("withheld_classes", "k"), "openset")
    if args.k is not None and "withheld_classes" in os_raw:
        os_raw["k"] = args.k

    ablate = dict(raw.get("ablate", {}))
    _take(ablate, ("sweep", "variants", "sizes"), "ablate")

    echo = {
        "version": __version__,
        "command": args.command,
        "seed": seed,
        "out_dir": str(out_dir),
        "dataset": dict(raw["dataset"]),
        "split": {"kind": "holdout", "test_fraction": split_spec.test_fraction},
        "model": {"embedding_dim": model_cfg.embedding_dim,
                  "num_classes": model_cfg.num_classes,
                  "input_shape": (list(input_shape)
                                  if isinstance(input_shape, tuple)
                                  else input_shape)},
        "train": {"loss_kind": train_cfg.loss_kind,
                  "epochs": train_cfg.epochs,
                  "learning_rate": train_cfg.learning_rate,
                  "batch_p": train_cfg.batch_p,
                  "batch_k": train_cfg.batch_k,
                  "margin_alpha": train_cfg.loss.margin_alpha,
                  "lambda_mix": train_cfg.loss.lambda_mix,
                  "rtl_epsilon": train_cfg.loss.rtl_epsilon,
                  "augment_ops": list(train_cfg.augment_ops)},
        "partitioner": part,
        "tsne": tsne,
        "openset": os_raw,
        "ablate": ablate,
    }

    return RunContext(command=args.command, echo=echo, seed=seed,
                      out_dir=out_dir, dataset=dataset, train_set=train_set,
                      test_set=test_set, model_cfg=model_cfg,
                      train_cfg=train_cfg, partitioner=part, tsne=tsne,
                      openset_cfg=os_raw, ablate_cfg=ablate,
                      raw_dataset=dict(raw["dataset"]))


# ---------------------------------------------------------------------------
# file output


def _write_text(path: Path, text: str):
    path.write_bytes(text.encode())


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def _write_echo(ctx: RunContext):
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(ctx.out_dir / "config.echo.json",
                json.dumps(ctx.echo, sort_keys=True, indent=2) + "\n")


def _history_rows(history):
    rows = [("epoch", "softmax_loss", "rtl_loss", "val_accuracy")]
    for rec in history:
        rows.append((rec.epoch, repr(float(rec.softmax_loss)),
                     repr(float(rec.rtl_loss)),
                     repr(float(rec.val_accuracy))))
    return rows


def _metrics_rows(report, ri: float, cluster_mode: bool):
    if cluster_mode:
        vals = ["n/a"] * 4
    else:
        vals = [_pct(report.accuracy_weighted), _pct(report.precision_macro),
                _pct(report.recall_macro), _pct(report.f1_macro)]
    return [("metric", "value"),
            ("accuracy_weighted", vals[0]),
            ("precision_macro", vals[1]),
            ("recall_macro", vals[2]),
            ("f1_macro", vals[3]),
            ("rand_index", _pct(ri))]


def _confusion_rows(confusion):
    k = confusion.shape[0]
    rows = [["true"] + [str(c) for c in range(k)]]
    for c in range(k):
        rows.append([str(c)] + [str(int(v)) for v in confusion[c]])
    return rows


# ---------------------------------------------------------------------------
# shared pipeline steps


def _train_model(ctx: RunContext, train_cfg=None, train_set=None,
                 model_cfg=None):
    cfg = train_cfg or ctx.train_cfg
    model = embedder.build_model(model_cfg or ctx.model_cfg, seed=cfg.seed)
    history = embedder.train(model, train_set or ctx.train_set, cfg)
    return model, history


def _fit_predict(ctx: RunContext, ref: EmbeddingSpace, queries: np.ndarray,
                 part: dict):
    kind = part["kind"]
    if kind == "knn":
        k = min(int(part.get("k", 5)), ref.n)
        return knn_classify_batch(ref, queries, k)
    if kind == "lr":
        model = fit_logistic(ref, max_iterations=int(
            part.get("max_iterations", 5000)))
        return np.array([predict_logistic(model, q) for q in queries],
                        dtype=np.intp)
    if kind == "svm":
        model = fit_linear_svm(ref, c=float(part.get("c", 1.0)),
                               iterations=int(part.get("iterations", 2000)))
        return np.array([predict_svm(model, q) for q in queries],
                        dtype=np.intp)
    if kind == "mlp":
        model = fit_mlp_head(ref, seed=ctx.seed,
                             hidden=int(part.get("hidden", 64)),
                             epochs=int(part.get("epochs", 200)),
                             learning_rate=float(
                                 part.get("learning_rate", 0.05)),
                             batch_size=int(part.get("batch_size", 32)))
        return np.array([predict_mlp(model, q) for q in queries],
                        dtype=np.intp)
    # gmm: unsupervised, output ids are cluster ids rather than classes
    model = fit_gmm(ref.points, ref.class_count, seed=ctx.seed,
                    max_iterations=int(part.get("max_iterations", 500)))
    return gmm_assign_batch(model, queries)


def _evaluate_model(ctx: RunContext, model, part: dict):
    """Returns (report_or_None, rand_index, confusion, predictions)."""
    ref = EmbeddingSpace(points=model.embed(ctx.train_set.samples),
                         labels=ctx.train_set.labels,
                         class_count=ctx.dataset.class_count)
    queries = model.embed(ctx.test_set.samples)
    predicted = _fit_predict(ctx, ref, queries, part)
    truth = ctx.test_set.labels
    ri = metrics.rand_index(truth, predicted)
    if part["kind"] == "gmm":
        k = max(ctx.dataset.class_count, int(predicted.max()) + 1)
        confusion = metrics.confusion_matrix(truth, predicted, k)
        return None, ri, confusion, predicted
    confusion = metrics.confusion_matrix(truth, predicted,
                                         ctx.dataset.class_count)
    return metrics.classification_metrics(confusion), ri, confusion, predicted


# ---------------------------------------------------------------------------
# commands


def cmd_train(ctx: RunContext) -> int:
    _write_echo(ctx)
    model, history = _train_model(ctx)
    model.save(ctx.out_dir / "checkpoint.bin")
    _write_text(ctx.out_dir / "history.csv", _csv_text(_history_rows(history)))
    final = history[-1].val_accuracy if history else float("nan")
    print(f"trained {ctx.train_cfg.epochs} epochs, "
          f"final val_accuracy {_pct(final)}%")
    print(f"wrote {ctx.out_dir}/checkpoint.bin, history.csv, config.echo.json")
    return EXIT_OK


def cmd_evaluate(ctx: RunContext) -> int:
    _write_echo(ctx)
    model = embedder.Model.load(ctx.out_dir / "checkpoint.bin")
    report, ri, confusion, _ = _evaluate_model(ctx, model, ctx.partitioner)
    _write_text(ctx.out_dir / "metrics.csv",
                _csv_text(_metrics_rows(report, ri,
                                        ctx.partitioner["kind"] == "gmm")))
    _write_text(ctx.out_dir / "confusion.csv",
                _csv_text(_confusion_rows(confusion)))
    if report is None:
        print(f"partitioner {ctx.partitioner['kind']}: "
              f"rand_index {_pct(ri)}% (cluster ids, no accuracy)")
    else:
        print(f"partitioner {ctx.partitioner['kind']}: "
              f"accuracy {_pct(report.accuracy_weighted)}%, "
              f"rand_index {_pct(ri)}%")
    print(f"wrote {ctx.out_dir}/metrics.csv, confusion.csv")
    return EXIT_OK


def _ablate_variants(ctx: RunContext):
    sweep = ctx.ablate_cfg.get("sweep")
    if sweep == "loss":
        rows = LOSS_SWEEP
    elif sweep == "augmentation":
        rows = AUGMENT_SWEEP
    elif sweep == "partitioner":
        rows = tuple((name, name) for name in PARTITIONERS)
    elif sweep == "resolution":
        if ctx.raw_dataset.get("kind") != "glyphs":
            raise ConfigError("resolution sweep needs a glyphs dataset")
        sizes = ctx.ablate_cfg.get("sizes", (16, 24, 32))
        rows = tuple((str(int(s)), int(s)) for s in sizes)
    else:
        raise ConfigError(
            "ablate.sweep must be loss, augmentation, partitioner or "
            f"resolution, got {sweep!r}")
    chosen = ctx.ablate_cfg.get("variants")
    if chosen:
        wanted = [str(v) for v in chosen]
        unknown = sorted(set(wanted) - {name for name, _ in rows})
        if unknown:
            raise ConfigError(f"unknown {sweep} variants {unknown}")
        rows = tuple((name, v) for name, v in rows if name in wanted)
    return sweep, rows


def _run_variant(ctx: RunContext, sweep: str, value):
    if sweep == "loss":
        cfg = replace(ctx.train_cfg, loss_kind=value)
        model, _ = _train_model(ctx, train_cfg=cfg)
        return _evaluate_model(ctx, model, ctx.partitioner)
    if sweep == "augmentation":
        cfg = replace(ctx.train_cfg, augment_ops=value)
        model, _ = _train_model(ctx, train_cfg=cfg)
        return _evaluate_model(ctx, model, ctx.partitioner)
    if sweep == "partitioner":
        if ctx.shared_model is None:
            ctx.shared_model, _ = _train_model(ctx)
        return _evaluate_model(ctx, ctx.shared_model,
                               {**ctx.partitioner, "kind": value})
    # resolution: re-render the glyphs at the requested size
    section = dict(ctx.raw_dataset)
    section["size"] = value
    dataset = _build_dataset(section, ctx.seed)
    pair = data.split(dataset, data.SplitSpec(
        kind="holdout", test_fraction=ctx.echo["split"]["test_fraction"],
        seed=ctx.seed))
    sub = replace(ctx,
                  dataset=dataset,
                  train_set=dataset.subset(pair.train),
                  test_set=dataset.subset(pair.test),
                  model_cfg=embedder.ModelConfig(
                      input_shape=dataset.samples.shape[1:],
                      embedding_dim=ctx.model_cfg.embedding_dim,
                      num_classes=dataset.class_count))
    model, _ = _train_model(sub)
    return _evaluate_model(sub, model, sub.partitioner)


def cmd_ablate(ctx: RunContext) -> int:
    _write_echo(ctx)
    sweep, variants = _ablate_variants(ctx)
    rows = [("variant", "accuracy_weighted", "precision_macro",
             "recall_macro", "f1_macro", "rand_index", "error")]
    for name, value in variants:
        try:
            report, ri, _, _ = _run_variant(ctx, sweep, value)
        except Exception as e:  # record and continue with the other rows
            rows.append((name, "n/a", "n/a", "n/a", "n/a", "n/a", str(e)))
            print(f"{name}: failed ({e})")
            continue
        if report is None:
            rows.append((name, "n/a", "n/a", "n/a", "n/a", _pct(ri), ""))
            print(f"{name}: rand_index {_pct(ri)}%")
        else:
            rows.append((name, _pct(report.accuracy_weighted),
                         _pct(report.precision_macro),
                         _pct(report.recall_macro), _pct(report.f1_macro),
                         _pct(ri), ""))
            print(f"{name}: accuracy {_pct(report.accuracy_weighted)}%, "
                  f"rand_index {_pct(ri)}%")
    _write_text(ctx.out_dir / "ablation.csv", _csv_text(rows))
    print(f"wrote {ctx.out_dir}/ablation.csv")
    return EXIT_OK


def _loo_knn(points: np.ndarray, labels: np.ndarray, class_count: int,
             k: int) -> np.ndarray:
    """kNN over the points themselves, each query excluding its own row."""
    n = points.shape[0]
    out = np.empty(n, dtype=np.intp)
    mask = np.ones(n, dtype=bool)
    for i in range(n):
        mask[i] = False
        ref = EmbeddingSpace(points=points[mask], labels=labels[mask],
                             class_count=class_count)
        out[i] = knn_classify(ref, points[i], min(k, n - 1))
        mask[i] = True
    return out


def _svg_scatter(coords, true_labels, predicted, split_flags, class_names,
                 caption: str) -> str:
    width, height = 760, 540
    x0, y0, x1, y1 = 40.0, 50.0, 520.0, 500.0
    xs, ys = coords[:, 0], coords[:, 1]
    span_x = (xs.max() - xs.min()) or 1.0
    span_y = (ys.max() - ys.min()) or 1.0

    def sx(v):
        return x0 + (x1 - x0) * (v - xs.min()) / span_x

    def sy(v):
        return y1 - (y1 - y0) * (v - ys.min()) / span_y

    k = len(class_names)
    colors = [f"hsl({round(360 * i / k)},65%,42%)" for i in range(k)]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{x0}" y="28" font-family="sans-serif" font-size="14">'
        f'{caption}</text>',
    ]
    for i in range(coords.shape[0]):
        px, py = sx(xs[i]), sy(ys[i])
        color = colors[int(true_labels[i])]
        if split_flags[i]:  # test sample: cross
            parts.append(
                f'<path d="M{px - 3:.2f} {py - 3:.2f}L{px + 3:.2f} '
                f'{py + 3:.2f}M{px - 3:.2f} {py + 3:.2f}L{px + 3:.2f} '
                f'{py - 3:.2f}" stroke="{color}" stroke-width="1.3" '
                f'fill="none"/>')
        else:
            parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" '
                         f'fill="{color}" fill-opacity="0.75"/>')
    lx, ly = 545, 60
    for i, name in enumerate(class_names):
        parts.append(
            f'<g class="legend"><rect x="{lx}" y="{ly + 22 * i}" width="12" '
            f'height="12" fill="{colors[i]}"/>'
            f'<text x="{lx + 18}" y="{ly + 22 * i + 11}" '
            f'font-family="sans-serif" font-size="12">{escape(str(name))}'
            f'</text></g>')
    ly2 = ly + 22 * len(class_names) + 14
    parts.append(f'<text x="{lx}" y="{ly2}" font-family="sans-serif" '
                 f'font-size="12">circle = train, cross = test</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_project(ctx: RunContext) -> int:
    _write_echo(ctx)
    model = embedder.Model.load(ctx.out_dir / "checkpoint.bin")
    train_emb = model.embed(ctx.train_set.samples)
    test_emb = model.embed(ctx.test_set.samples)
    k = min(int(ctx.partitioner.get("k", 5)), train_emb.shape[0])

    # predictions come from the full metric space; the 2D map is display only
    ref = EmbeddingSpace(points=train_emb, labels=ctx.train_set.labels,
                         class_count=ctx.dataset.class_count)
    pred_train = _loo_knn(train_emb, ctx.train_set.labels,
                          ctx.dataset.class_count, k)
    pred_test = knn_classify_batch(ref, test_emb, k)
    ri_train = metrics.rand_index(ctx.train_set.labels, pred_train)
    ri_test = metrics.rand_index(ctx.test_set.labels, pred_test)

    tsne_cfg = projection.TsneConfig(
        perplexity=float(ctx.tsne.get("perplexity", 30.0)),
        iterations=int(ctx.tsne.get("iterations", 1000)),
        learning_rate=float(ctx.tsne.get("learning_rate", 200.0)),
        early_exaggeration=float(ctx.tsne.get("early_exaggeration", 12.0)),
        seed=ctx.seed)
    stacked = np.vstack([train_emb, test_emb])
    coords, _ = projection.tsne_project(stacked, tsne_cfg)

    truth = np.concatenate([ctx.train_set.labels, ctx.test_set.labels])
    pred = np.concatenate([pred_train, pred_test])
    split_flags = np.concatenate([np.zeros(train_emb.shape[0], dtype=bool),
                                  np.ones(test_emb.shape[0], dtype=bool)])
    rows = [("id", "x", "y", "true_label", "predicted_label")]
    for i in range(coords.shape[0]):
        rows.append((i, f"{coords[i, 0]:.6f}", f"{coords[i, 1]:.6f}",
                     int(truth[i]), int(pred[i])))
    _write_text(ctx.out_dir / "layout.csv", _csv_text(rows))

    caption = (f"train RandIndex={_pct(ri_train)} "
               f"test RandIndex={_pct(ri_test)}")
    _write_text(ctx.out_dir / "plot.svg",
                _svg_scatter(coords, truth, pred, split_flags,
                             ctx.dataset.class_names, caption))
    print(caption)
    print(f"wrote {ctx.out_dir}/layout.csv, plot.svg")
    return EXIT_OK


def cmd_openset(ctx: RunContext) -> int:
    _write_echo(ctx)
    raw = ctx.openset_cfg
    if "withheld_classes" not in raw:
        raise ConfigError("openset needs openset.withheld_classes in config")
    spec = openset.OpenSetSpec(
        withheld_classes=frozenset(int(c) for c in raw["withheld_classes"]),
        train=ctx.train_cfg,
        k=int(raw.get("k", 5)))
    result = openset.run_open_set(ctx.train_set, ctx.test_set, ctx.model_cfg,
                                  spec)

    withheld = sorted(spec.withheld_classes)
    unseen_mask = np.isin(ctx.test_set.labels, withheld)
    for name, report, mask in (("seen", result.seen, ~unseen_mask),
                               ("unseen", result.unseen, unseen_mask)):
        ri = (_pct(metrics.rand_index(ctx.test_set.labels[mask],
                                      result.predictions[mask]))
              if mask.sum() > 1 else "n/a")
        rows = [("metric", "value"),
                ("withheld_classes", " ".join(str(c) for c in withheld)),
                ("accuracy_weighted", _pct(report.accuracy_weighted)),
                ("accuracy_macro", _pct(report.recall_macro)),
                ("precision_macro", _pct(report.precision_macro)),
                ("recall_macro", _pct(report.recall_macro)),
                ("f1_macro", _pct(report.f1_macro)),
                ("rand_index", ri)]
        _write_text(ctx.out_dir / f"metrics.{name}.csv", _csv_text(rows))

    print(f"withheld {withheld}: "
          f"seen accuracy {_pct(result.seen.accuracy_weighted)}%, "
          f"unseen accuracy {_pct(result.unseen_accuracy_weighted)}% "
          f"(weighted) / {_pct(result.unseen_accuracy_macro)}% (macro)")
    print(f"wrote {ctx.out_dir}/metrics.seen.csv, metrics.unseen.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


_COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "project": cmd_project,
    "openset": cmd_openset,
}

_VALIDATION_ERRORS = (ConfigError, data.DataError, openset.OpenSetError,
                      embedder.ModelError, projection.ProjectionError,
                      PartitionError, ContainerError, metrics.MetricsError,
                      FileNotFoundError)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="metriclab",
        description="metric-space training and evaluation experiments")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="experiment JSON")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", default=None,
                        help="override the output directory")
    parser.add_argument("--partitioner", choices=PARTITIONERS, default=None)
    parser.add_argument("--k", type=int, default=None,
                        help="neighbor count override")
    args = parser.parse_args(argv)

    try:
        ctx = load_context(args)
    except Exception as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        return _COMMANDS[args.command](ctx)
    except embedder.TrainError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except _VALIDATION_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
