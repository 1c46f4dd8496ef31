import json

import numpy as np
import pytest

from gesm import autodiff as ad
from gesm.autodiff import Tape, backward
from gesm.data import LABEL_RATE, SplitSpec, synth_citation, synth_multilabel, synth_two_cluster
from gesm.losses import masked_cross_entropy, sample_triplets, triplet_regularizer
from gesm.model import TRAIN, VARIANTS, forward, init_params
from gesm.trainer import (MULTI_LABEL, PRESETS, GesmConfig, PreparedGraph, accuracy, evaluate,
                          micro_f1, micro_f1_from_counts, parse_kv, run_seeds, substream, train,
                          train_inductive)

FAST = GesmConfig(hidden=8, heads=2, steps=3, dropout=0.5, lr=0.01, max_epochs=30, patience=30)


@pytest.fixture(scope="module")
def cluster():
    return synth_two_cluster(20, 0.3, 0.05, seed=2, noise=0.8)


class TestConfig:
    def test_defaults_valid(self):
        cfg = GesmConfig()
        assert (cfg.hidden, cfg.steps, cfg.heads, cfg.dropout) == (64, 15, 8, 0.7)
        assert cfg.variant == VARIANTS["full"]

    @pytest.mark.parametrize("bad", [dict(hidden=10, heads=4), dict(dropout=1.0), dict(beta=1.5),
                                     dict(lr=0.0), dict(patience=0), dict(steps=-1),
                                     dict(task="regression"), dict(dtype="float16")])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            GesmConfig(**bad)

    def test_base_variant_ignores_head_divisibility(self):
        GesmConfig(hidden=10, heads=4, variant="base")

    def test_parse_kv(self):
        text = "# comment\nhidden = 32\n\nsteps=5  # trailing\nvariant=att\n"
        assert parse_kv(text) == {"hidden": "32", "steps": "5", "variant": "att"}
        with pytest.raises(ValueError):
            parse_kv("hidden 32")

    def test_overrides_coerce(self):
        cfg = GesmConfig().with_overrides({"hidden": "32", "dropout": "0.5", "variant": "base",
                                           "resample_triplets": "false"})
        assert cfg.hidden == 32 and cfg.dropout == 0.5 and cfg.variant == VARIANTS["base"]
        assert cfg.resample_triplets is False

    def test_override_errors(self):
        with pytest.raises(KeyError):
            GesmConfig().with_overrides({"hiden": "3"})
        with pytest.raises(ValueError):
            GesmConfig().with_overrides({"debug": "maybe"})

    def test_file_round_trip(self, tmp_path):
        cfg = GesmConfig(hidden=16, steps=4, variant="att", l2=0.0008)
        (tmp_path / "c.txt").write_text(cfg.to_kv())
        assert GesmConfig.from_file(tmp_path / "c.txt") == cfg

    def test_presets(self):
        assert PRESETS["ppi"].multi_label and PRESETS["ppi"].dropout == 0 and PRESETS["ppi"].l2 == 0
        assert PRESETS["cora-public"].patience == 20
        for cfg in PRESETS.values():
            cfg.validate()

    def test_substreams_independent(self):
        a = substream(0, "init").random(4)
        assert np.array_equal(a, substream(0, "init").random(4))
        assert not np.array_equal(a, substream(0, "dropout").random(4))
        assert not np.array_equal(a, substream(1, "init").random(4))


class TestMetrics:
    def test_accuracy_all_correct(self):
        out = np.eye(3)
        assert accuracy(out, np.arange(3), np.ones(3, bool)) == 1.0

    def test_micro_f1_hand_case(self):
        truth = np.array([[1, 0], [1, 0], [0, 1], [0, 0]])
        pred = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.3], [0.7, 0.1]])  # TP=2, FP=1, FN=1
        f1 = micro_f1(pred, truth, np.ones(4, bool))
        assert abs(f1 - 4 / 6) < 1e-15 and abs(f1 - 0.6667) < 1e-4

    def test_micro_f1_all_zero_predictions(self):
        assert micro_f1(np.zeros((3, 2)), np.ones((3, 2)), np.ones(3, bool)) == 0.0
        assert micro_f1_from_counts(0, 0, 0) == 0.0

    def test_threshold_is_strict(self):
        assert micro_f1(np.full((1, 1), 0.5), np.ones((1, 1)), np.ones(1, bool)) == 0.0

    def test_empty_mask(self, cluster):
        params = train(cluster, FAST.replace(max_epochs=1)).params
        with pytest.raises(ValueError):
            evaluate(cluster, params, FAST, np.zeros(cluster.n, bool))


class TestTrain:
    def test_deterministic(self, cluster):
        a = train(cluster, FAST)
        b = train(cluster, FAST)
        assert a.to_jsonl() == b.to_jsonl()
        for x, y in zip(a.params.tensors(), b.params.tensors()):
            assert np.array_equal(x.data, y.data)

    def test_seed_changes_run(self, cluster):
        assert train(cluster, FAST).to_jsonl() != train(cluster, FAST.replace(seed=1)).to_jsonl()

    def test_jsonl_layout(self, cluster):
        rep = train(cluster, FAST.replace(max_epochs=5))
        lines = [json.loads(x) for x in rep.to_jsonl().splitlines()]
        assert [x["type"] for x in lines] == ["epoch"] * 5 + ["summary"]
        assert {"train_loss", "val_loss", "val_metric"} <= set(lines[0])

    def test_loss_decomposition(self, cluster):
        rep = train(cluster, FAST.replace(l2=0.01))
        for r in rep.epochs:
            assert r.train_loss == r.j + r.r + 0.01 * r.l2
            assert np.isfinite(r.train_loss)
            assert r.r != 0.0

    def test_no_regularizer_variant_has_zero_r(self, cluster):
        rep = train(cluster, FAST.replace(variant="att"))
        assert all(r.r == 0.0 for r in rep.epochs)

    def test_regularizer_gradient_separates(self, cluster):
        # full-objective gradient minus the R gradient equals the w/o-reg gradient
        pg = PreparedGraph(cluster)
        params = init_params(cluster.f, cluster.c, 8, 3, VARIANTS["full"], np.random.default_rng(0),
                             heads=2)
        batch = sample_triplets(pg.adj, np.random.default_rng(1), 50)
        tensors = params.tensors()

        def grads(with_j, with_r):
            with Tape() as tape:
                res = forward(pg.X, pg.A_hat, params, VARIANTS["full"], TRAIN, dropout=0.3,
                              rng=np.random.default_rng(2))
                terms = []
                if with_j:
                    terms.append(masked_cross_entropy(res.output, cluster.labels, cluster.train_mask))
                    terms.append(ad.mul(ad.l2_norm_sq(params.weights()), 0.003))
                if with_r:
                    terms.append(triplet_regularizer(res.embedding, batch, 0.5))
                total = terms[0]
                for t in terms[1:]:
                    total = ad.add(total, t)
            g = backward(tape, total, tensors)
            return [g[t] for t in tensors]

        for full, r_only, no_reg in zip(grads(True, True), grads(False, True), grads(True, False)):
            assert np.allclose(full - r_only, no_reg, rtol=0, atol=1e-12)

    def test_best_params_restored(self, cluster):
        rep = train(cluster, FAST.replace(max_epochs=60, patience=60))
        assert 0 <= rep.best_epoch < rep.epochs_run
        best = rep.epochs[rep.best_epoch]
        assert best.val_metric == max(r.val_metric for r in rep.epochs)
        ties = [r for r in rep.epochs if r.val_metric == best.val_metric]
        assert best.val_loss == min(r.val_loss for r in ties)
        # restored parameters reproduce the best epoch's validation numbers
        assert evaluate(cluster, rep.params, FAST, cluster.val_mask) == best.val_metric
        assert rep.val_metric == best.val_metric

    def test_early_stopping_rule(self, cluster):
        cfg = FAST.replace(max_epochs=300, patience=5, lr=0.05)
        rep = train(cluster, cfg)
        assert rep.epochs_run < 300
        best_acc, best_loss, last_improvement = -1.0, np.inf, 0
        for r in rep.epochs:
            if r.val_metric > best_acc or r.val_loss < best_loss:
                last_improvement = r.epoch
            best_acc, best_loss = max(best_acc, r.val_metric), min(best_loss, r.val_loss)
        assert rep.epochs[-1].epoch - last_improvement == 5

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self, cluster):
        rep = train(cluster, FAST.replace(lr=1e200, variant="base"))
        assert rep.diverged
        assert all(np.isfinite(r.train_loss) for r in rep.epochs)

    def test_float32_mode(self, cluster):
        rep = train(cluster, FAST.replace(dtype="float32", max_epochs=5))
        assert rep.params.pred_weight.dtype == np.float32
        assert np.isfinite(rep.test_metric)

    def test_frozen_triplets(self, cluster):
        rep = train(cluster, FAST.replace(resample_triplets=False, max_epochs=5))
        assert rep.status == "ok"

    def test_task_mismatch(self, cluster):
        with pytest.raises(ValueError):
            train(cluster, FAST.replace(task=MULTI_LABEL))

    def test_sparse_features_match_dense(self):
        ds = synth_citation(n=200, n_classes=3, n_features=400, seed=1)
        pg = PreparedGraph(ds)
        assert not isinstance(pg.X, np.ndarray)
        params = init_params(ds.f, ds.c, 8, 2, VARIANTS["full"], np.random.default_rng(0), heads=2)
        sparse_out = forward(pg.X, pg.A_hat, params, VARIANTS["full"]).output.data
        dense_out = forward(pg.X.to_dense(), pg.A_hat, params, VARIANTS["full"]).output.data
        assert np.allclose(sparse_out, dense_out, rtol=0, atol=1e-13)


class TestSeeds:
    def test_single_seed(self, cluster):
        sweep = run_seeds(cluster, FAST, 1)
        assert sweep.std == 0.0
        assert sweep.mean == train(cluster, FAST).test_metric

    def test_repeat_sweeps_identical(self, cluster):
        cfg = FAST.replace(dropout=0.0, max_epochs=10)
        a = run_seeds(cluster, cfg, 3)
        b = run_seeds(cluster, cfg, 3)
        assert a.metrics == b.metrics and a.seeds == [0, 1, 2]
        assert np.std(np.array(a.metrics) - np.array(b.metrics)) == 0

    def test_label_rate_resplits(self):
        ds = synth_citation(n=300, n_classes=3, n_features=50, seed=0)
        split = SplitSpec(LABEL_RATE, rate=0.05, val_count=50, test_count=100)
        sweep = run_seeds(ds, FAST.replace(max_epochs=3), 2, split=split)
        assert len(sweep.metrics) == 2

    def test_partial_failures_recorded(self, cluster, monkeypatch):
        import gesm.trainer as tr

        real = tr.train

        def flaky(ds, config, callback=None):
            if config.seed == 1:
                raise FloatingPointError("boom")
            return real(ds, config, callback)

        monkeypatch.setattr(tr, "train", flaky)
        sweep = run_seeds(cluster, FAST.replace(max_epochs=3), 3)
        assert sweep.seeds == [0, 2] and "boom" in sweep.failures[1]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_all_failed(self, cluster):
        with pytest.raises(RuntimeError):
            run_seeds(cluster, FAST.replace(lr=1e200, variant="base"), 2)

    def test_k_positive(self, cluster):
        with pytest.raises(ValueError):
            run_seeds(cluster, FAST, 0)


class TestInductive:
    def test_multi_label_graphs(self):
        graphs = [synth_multilabel(n=30 + 5 * i, seed=i) for i in range(4)]
        cfg = PRESETS["ppi"].replace(hidden=8, heads=2, max_epochs=40, patience=40)
        rep = train_inductive(graphs[:2], graphs[2:3], graphs[3:], cfg)
        assert rep.status == "ok"
        assert 0.0 <= rep.test_metric <= 1.0
        assert rep.epochs[-1].l2 == 0.0
        first, last = rep.epochs[0].j, min(r.j for r in rep.epochs)
        assert last < first

    def test_requires_train_and_val(self):
        with pytest.raises(ValueError):
            train_inductive([], [synth_multilabel(seed=0)], [], PRESETS["ppi"])
