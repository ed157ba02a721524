"""Acceptance gate: ten criteria, one printed PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as the
criteria execute. Every check is deterministic; the training-based
criteria use fixed seeds and majority rules where single runs are noisy.
"""

import json

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from metriclab import (autodiff as ad, cli, data, embedder, losses, metrics,
                       mining, openset, projection)
from metriclab.partition import (EmbeddingSpace, fit_gmm, fit_linear_svm,
                                 fit_logistic, fit_mlp_head, gmm_assign_batch,
                                 knn_classify_batch, predict_logistic,
                                 predict_mlp, predict_svm)


def report(name: str, ok: bool, detail: str):
    print(f"\n[{name}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"{name}: {detail}"


def knn_eval(model, train_set, test_samples, test_labels, k=5):
    ref = EmbeddingSpace(points=model.embed(train_set.samples),
                         labels=train_set.labels,
                         class_count=train_set.class_count)
    pred = knn_classify_batch(ref, model.embed(test_samples), k)
    acc = float((pred == test_labels).mean())
    return acc, pred


def glyph_split(seed, per_class=100, size=16, jitter=0.02):
    ds = data.gen_glyphs(class_count=8, per_class=per_class, size=size,
                         seed=seed, jitter=jitter)
    pair = data.split(ds, data.SplitSpec(kind="holdout", test_fraction=0.2,
                                         seed=seed))
    return ds.subset(pair.train), ds.subset(pair.test)


def train_glyph_model(train_set, seed, loss_kind="hybrid", epochs=30,
                      augment_ops=()):
    mc = embedder.ModelConfig(input_shape=train_set.samples.shape[1:],
                              embedding_dim=64, num_classes=8)
    tc = embedder.TrainConfig(loss_kind=loss_kind, seed=seed, epochs=epochs,
                              augment_ops=augment_ops)
    model = embedder.build_model(mc, seed=seed)
    embedder.train(model, train_set, tc)
    return model


# ---------------------------------------------------------------------------
# 1. gradient correctness


def _fd_case(case: int, rng):
    b, d, k = 3, 5, 3
    if case == 0:
        pair_labels = np.array([0, 1, 0])
        graph = ad.Graph(("a", "b"), lambda a, b: losses.contrastive_loss(
            a, b, pair_labels, margin=0.5))
        inputs = {"a": ad.Tensor(rng.normal(size=(b, d)), requires_grad=True),
                  "b": ad.Tensor(rng.normal(size=(b, d)), requires_grad=True)}
    elif case == 1:
        graph = ad.Graph(("a", "p", "n"),
                         lambda a, p, n: losses.triplet_loss(a, p, n, 0.5))
        inputs = {name: ad.Tensor(rng.normal(size=(b, d)), requires_grad=True)
                  for name in ("a", "p", "n")}
    elif case == 2:
        graph = ad.Graph(("a", "p", "n"),
                         lambda a, p, n: losses.reciprocal_triplet_loss(a, p, n))
        inputs = {name: ad.Tensor(rng.normal(size=(b, d)), requires_grad=True)
                  for name in ("a", "p", "n")}
    elif case == 3:
        labels = np.array([0, 2, 1, 0])
        graph = ad.Graph(("z",),
                         lambda z: losses.softmax_cross_entropy(z, labels))
        inputs = {"z": ad.Tensor(rng.normal(size=(4, k)), requires_grad=True)}
    elif case == 4:
        labels = np.array([1, 0, 2])
        graph = ad.Graph(("z", "a", "p", "n"),
                         lambda z, a, p, n: losses.hybrid_loss(
                             z, labels, a, p, n, lambda_mix=0.01))
        inputs = {"z": ad.Tensor(rng.normal(size=(b, k)), requires_grad=True)}
        inputs.update({name: ad.Tensor(rng.normal(size=(b, d)),
                                       requires_grad=True)
                       for name in ("a", "p", "n")})
    elif case == 5:
        def mlp(x, w1, b1, w2, b2):
            h = ad.relu(ad.add(ad.matmul(x, w1), b1))
            return ad.mean(ad.square(ad.add(ad.matmul(h, w2), b2)))
        graph = ad.Graph(("x", "w1", "b1", "w2", "b2"), mlp)
        inputs = {"x": ad.Tensor(rng.normal(size=(4, 6)), requires_grad=True),
                  "w1": ad.Tensor(rng.normal(size=(6, 7)), requires_grad=True),
                  "b1": ad.Tensor(rng.normal(size=7), requires_grad=True),
                  "w2": ad.Tensor(rng.normal(size=(7, 2)), requires_grad=True),
                  "b2": ad.Tensor(rng.normal(size=2), requires_grad=True)}
    else:
        def convnet(x, w, bias):
            h = ad.relu(ad.conv2d(x, w, bias))
            return ad.mean(ad.square(ad.mean_pool2d(h, 2)))
        graph = ad.Graph(("x", "w", "bias"), convnet)
        inputs = {"x": ad.Tensor(rng.normal(size=(2, 1, 7, 7)),
                                 requires_grad=True),
                  "w": ad.Tensor(rng.normal(size=(3, 1, 3, 3)),
                                 requires_grad=True),
                  "bias": ad.Tensor(rng.normal(size=3), requires_grad=True)}
    return graph, inputs


def test_c01_gradients():
    worst = 0.0
    checked = 0
    for seed in range(100):
        case = seed % 7
        for attempt in range(25):
            rng = np.random.default_rng([seed, attempt, 97])
            graph, inputs = _fd_case(case, rng)
            out = ad.evaluate(graph, inputs)
            if ad.kink_distance(next(iter(out.values()))) > 1e-3:
                break
        else:
            pytest.fail(f"no kink-free draw for seed {seed}")
        rep = ad.finite_difference_check(graph, inputs, step=1e-5,
                                         tolerance=1e-4)
        worst = max(worst, rep.max_rel_err)
        checked += 1
        if not rep.passed:
            report("C1 gradient correctness", False,
                   f"seed {seed} case {case}: max rel err {rep.max_rel_err:.2e}")
    report("C1 gradient correctness", worst < 1e-4 and checked == 100,
           f"100 seeded inputs, worst rel err {worst:.2e}")


# ---------------------------------------------------------------------------
# 2. mining oracle


def test_c02_mining_oracle():
    rng = np.random.default_rng(1234)
    mismatches = 0
    for _ in range(500):
        b = int(rng.integers(2, 17))
        labels = rng.integers(0, int(rng.integers(2, 5)), size=b)
        points = rng.normal(size=(b, 4))
        dists = mining.pairwise_distances(points)
        mined = mining.batch_hard(labels, points=points)

        valid = mining.all_valid_triplets(labels)
        expected = {}
        for a, p, n in valid:
            best = expected.get(a)
            if best is None:
                expected[a] = (p, n)
                continue
            bp, bn = best
            if dists[a, p] > dists[a, bp]:
                bp = p
            if dists[a, n] < dists[a, bn]:
                bn = n
            expected[a] = (bp, bn)
        got = {int(a): (int(p), int(n)) for a, p, n in
               zip(mined.anchor, mined.positive, mined.negative)}
        if got != expected:
            mismatches += 1
    report("C2 mining oracle", mismatches == 0,
           f"500 random batches (B<=16), {mismatches} mismatches")


# ---------------------------------------------------------------------------
# 3. closed-set benchmark


def test_c03_closed_set_benchmark():
    ds = data.gen_blobs(class_count=5, per_class=200, dim=10,
                        separation=10.0, seed=0)
    pair = data.split(ds, data.SplitSpec(kind="holdout", test_fraction=0.2,
                                         seed=0))
    tr, te = ds.subset(pair.train), ds.subset(pair.test)
    mc = embedder.ModelConfig(input_shape=10, embedding_dim=128, num_classes=5)
    tc = embedder.TrainConfig(loss_kind="hybrid", seed=0, epochs=30)
    model = embedder.build_model(mc, seed=0)
    embedder.train(model, tr, tc)
    blob_acc, _ = knn_eval(model, tr, te.samples, te.labels)

    ds = data.gen_glyphs(class_count=8, per_class=150, size=32, seed=0)
    pair = data.split(ds, data.SplitSpec(kind="holdout", test_fraction=0.2,
                                         seed=0))
    tr, te = ds.subset(pair.train), ds.subset(pair.test)
    mc = embedder.ModelConfig(input_shape=(32, 32), embedding_dim=128,
                              num_classes=8)
    tc = embedder.TrainConfig(loss_kind="hybrid", seed=0, epochs=60)
    model = embedder.build_model(mc, seed=0)
    embedder.train(model, tr, tc)
    glyph_acc, _ = knn_eval(model, tr, te.samples, te.labels)

    report("C3 closed-set benchmark",
           blob_acc >= 0.95 and glyph_acc >= 0.90,
           f"blobs {100 * blob_acc:.1f}% (need >=95), "
           f"glyphs {100 * glyph_acc:.1f}% (need >=90)")


# ---------------------------------------------------------------------------
# 4. ablation ordering


def test_c04_ablation_ordering():
    details = []
    wins = 0
    for seed in range(3):
        tr, te = glyph_split(seed)
        out = {}
        for kind in ("hybrid", "softmax", "rtl"):
            model = train_glyph_model(tr, seed, loss_kind=kind)
            acc, pred = knn_eval(model, tr, te.samples, te.labels)
            out[kind] = (acc, metrics.rand_index(te.labels, pred))
        ok = (out["hybrid"][0] >= out["softmax"][0] - 0.01
              and out["hybrid"][1] >= out["rtl"][1])
        wins += ok
        details.append(f"seed {seed} "
                       f"hyb({100 * out['hybrid'][0]:.1f}%,"
                       f"RI {out['hybrid'][1]:.3f}) "
                       f"sm {100 * out['softmax'][0]:.1f}% "
                       f"rtl RI {out['rtl'][1]:.3f}")
    report("C4 ablation ordering", wins >= 2,
           f"{wins}/3 seeds hold; " + "; ".join(details))


# ---------------------------------------------------------------------------
# 5. augmentation effect


def test_c05_augmentation_effect():
    wins = 0
    details = []
    for seed in range(3):
        tr, te = glyph_split(seed)
        rot_rng = np.random.default_rng([seed, 777])
        rotated = np.stack([data.rotate(s, float(rot_rng.uniform(0, 360)))
                            for s in te.samples])
        accs = {}
        for name, ops in (("aug", ("R", "S", "G")), ("none", ())):
            model = train_glyph_model(tr, seed, augment_ops=ops)
            accs[name], _ = knn_eval(model, tr, rotated, te.labels)
        gap = accs["aug"] - accs["none"]
        wins += gap >= 0.05
        details.append(f"seed {seed} gap {100 * gap:.1f}pts")
    report("C5 augmentation effect", wins >= 2,
           f"{wins}/3 seeds with rotated-test gap >= 5pts; "
           + "; ".join(details))


# ---------------------------------------------------------------------------
# 6. open-set recovery


def test_c06_open_set():
    withheld = (6, 7)
    passes = 0
    details = []
    for seed in range(5):
        tr, te = glyph_split(seed)
        mc = embedder.ModelConfig(input_shape=(16, 16), embedding_dim=64,
                                  num_classes=8)
        tc = embedder.TrainConfig(loss_kind="hybrid", seed=seed, epochs=30)

        closed = embedder.build_model(mc, seed=seed)
        embedder.train(closed, tr, tc)
        _, closed_pred = knn_eval(closed, tr, te.samples, te.labels)
        seen_mask = ~np.isin(te.labels, withheld)
        closed_seen = float(
            (closed_pred[seen_mask] == te.labels[seen_mask]).mean())

        spec = openset.OpenSetSpec(withheld_classes=frozenset(withheld),
                                   train=tc, k=5)
        res = openset.run_open_set(tr, te, mc, spec)

        ref_freq = np.bincount(tr.labels, minlength=8) / tr.n
        unseen_labels = te.labels[~seen_mask]
        chance = float(sum((unseen_labels == c).mean() * ref_freq[c]
                           for c in withheld))
        ok = (res.unseen_accuracy_weighted >= 2 * chance
              and res.seen.accuracy_weighted >= closed_seen - 0.03)
        passes += ok
        details.append(
            f"seed {seed} unseen {100 * res.unseen_accuracy_weighted:.1f}% "
            f"(bar {100 * 2 * chance:.1f}%), seen "
            f"{100 * res.seen.accuracy_weighted:.1f}% vs closed "
            f"{100 * closed_seen:.1f}%")
    report("C6 open-set recovery", passes >= 4,
           f"{passes}/5 seeds pass; " + "; ".join(details))


# ---------------------------------------------------------------------------
# 7. metrics oracles


def test_c07_metrics_oracles():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 60))
        a = rng.integers(0, 5, size=n)
        b = rng.integers(0, 5, size=n)
        agree = sum((a[i] == a[j]) == (b[i] == b[j])
                    for i in range(n) for j in range(i + 1, n))
        exact = agree / (n * (n - 1) / 2)
        worst = max(worst, abs(metrics.rand_index(a, b) - exact))

    rep = metrics.classification_metrics(np.array([[9, 1], [4, 6]]))
    fixture_ok = (abs(rep.accuracy_weighted - 0.75) < 1e-12
                  and abs(rep.precision_macro - (9 / 13 + 6 / 7) / 2) < 1e-12
                  and abs(rep.recall_macro - 0.75) < 1e-12)
    report("C7 metrics oracles", worst < 1e-12 and fixture_ok,
           f"rand-index pair-loop max err {worst:.1e}; "
           f"[[9,1],[4,6]] fixture {'ok' if fixture_ok else 'wrong'}")


# ---------------------------------------------------------------------------
# 8. partitioner sanity


def test_c08_partitioners():
    ds = data.gen_blobs(class_count=4, per_class=60, dim=8, separation=8.0,
                        seed=5)
    pair = data.split(ds, data.SplitSpec(kind="holdout", test_fraction=0.25,
                                         seed=5))
    tr, te = ds.subset(pair.train), ds.subset(pair.test)
    mc = embedder.ModelConfig(input_shape=8, embedding_dim=32, num_classes=4)
    tc = embedder.TrainConfig(loss_kind="hybrid", seed=5, epochs=10)
    model = embedder.build_model(mc, seed=5)
    embedder.train(model, tr, tc)

    ref = EmbeddingSpace(points=model.embed(tr.samples), labels=tr.labels,
                         class_count=4)
    queries = model.embed(te.samples)
    chance = 0.25
    accs = {}
    accs["knn"] = float((knn_classify_batch(ref, queries, 5)
                         == te.labels).mean())
    lr = fit_logistic(ref, max_iterations=1000)
    accs["lr"] = float(np.mean([predict_logistic(lr, q) == t
                                for q, t in zip(queries, te.labels)]))
    svm = fit_linear_svm(ref, iterations=1000)
    accs["svm"] = float(np.mean([predict_svm(svm, q) == t
                                 for q, t in zip(queries, te.labels)]))
    mlp = fit_mlp_head(ref, seed=5, epochs=40)
    accs["mlp"] = float(np.mean([predict_mlp(mlp, q) == t
                                 for q, t in zip(queries, te.labels)]))

    gmm = fit_gmm(ref.points, 4, seed=5)
    clusters = gmm_assign_batch(gmm, queries)
    gmm_ri = metrics.rand_index(te.labels, clusters)
    # chance RI baseline: label-shuffled assignment against the truth
    shuffle_rng = np.random.default_rng(50)
    base_ri = float(np.mean([
        metrics.rand_index(te.labels, shuffle_rng.permutation(clusters))
        for _ in range(20)]))
    ll_diffs = np.diff(gmm.ll_trace)
    monotone = bool(np.all(ll_diffs >= -1e-9))

    classifier_ok = all(a > chance for a in accs.values())
    report("C8 partitioner sanity",
           classifier_ok and gmm_ri > base_ri and monotone,
           f"accs {({k: round(v, 3) for k, v in accs.items()})} vs chance "
           f"{chance}; gmm RI {gmm_ri:.3f} vs shuffled {base_ri:.3f}; "
           f"EM trace monotone: {monotone}")


# ---------------------------------------------------------------------------
# 9. t-SNE behavior


def test_c09_tsne():
    monotone_runs = 0
    for seed in range(20):
        ds = data.gen_blobs(class_count=3, per_class=20, dim=8,
                            separation=8.0, seed=seed)
        cfg = projection.TsneConfig(perplexity=10.0, iterations=1000,
                                    seed=seed)
        _, trace = projection.tsne_project(ds.samples, cfg)
        if np.all(np.diff(trace[-500:]) <= 0.0):
            monotone_runs += 1

    rng = np.random.default_rng(0)
    pts = np.vstack([rng.normal(0.0, 1.0, (10, 5)),
                     rng.normal(40.0, 1.0, (10, 5))])
    labels = np.array([0] * 10 + [1] * 10)
    cfg = projection.TsneConfig(perplexity=5.0, iterations=1000, seed=0)
    coords, _ = projection.tsne_project(pts, cfg)
    sil = float(silhouette_score(coords, labels))

    report("C9 t-SNE", monotone_runs >= 19 and sil > 0.5,
           f"KL non-increasing last 500 iters in {monotone_runs}/20 runs; "
           f"blob silhouette {sil:.3f}")


# ---------------------------------------------------------------------------
# 10. end-to-end determinism


def test_c10_cli_determinism(tmp_path):
    cfg = {
        "seed": 7,
        "dataset": {"kind": "blobs", "class_count": 4, "per_class": 40,
                    "dim": 8, "separation": 8.0},
        "model": {"embedding_dim": 16},
        "train": {"loss_kind": "hybrid", "epochs": 3, "learning_rate": 0.05,
                  "batch_p": 4, "batch_k": 4},
        "partitioner": {"kind": "knn", "k": 5},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    outs = []
    for name in ("one", "two"):
        out = tmp_path / name
        assert cli.main(["train", "--config", str(cfg_path),
                         "--out", str(out)]) == 0
        assert cli.main(["evaluate", "--config", str(cfg_path),
                         "--out", str(out)]) == 0
        outs.append(out)

    same_ckpt = ((outs[0] / "checkpoint.bin").read_bytes()
                 == (outs[1] / "checkpoint.bin").read_bytes())
    same_metrics = ((outs[0] / "metrics.csv").read_bytes()
                    == (outs[1] / "metrics.csv").read_bytes())
    report("C10 determinism", same_ckpt and same_metrics,
           f"checkpoint identical: {same_ckpt}, "
           f"metrics.csv identical: {same_metrics}")
