import json
import math

import numpy as np
import pytest

from lahn import autodiff as ad
from lahn.data import encode_examples, generate_confound_corpus, make_batches
from lahn.encoder import clone_params, load_checkpoint
from lahn.momentum import EmaState
from lahn.trainer import (
    WARMUP_FILL,
    NonFiniteLossError,
    TrainConfig,
    adam_step,
    init_adam,
    init_state,
    run_ablation_grid,
    run_training,
    train_step,
)


def small_config(**overrides):
    base = dict(
        objective="lahn",
        strategy="simweight",
        tau=0.2,
        lam=0.1,
        m=0.99,
        q=16,
        k=4,
        lr=1e-3,
        batch_size=4,
        dropout=0.1,
        epochs=2,
        seed=0,
        max_len=16,
        d_emb=8,
        hidden=12,
        d_feat=8,
        min_freq=1,
        max_vocab=500,
    )
    base.update(overrides)
    return TrainConfig.from_dict(base)


def tiny_corpus(n_per_class=12, rate=0.5, seed=3):
    return generate_confound_corpus(n_per_class, rate, seed)


def first_batch(config, train):
    from lahn.data import build_vocab

    vocab = build_vocab((e.text for e in train), config.min_freq, config.max_vocab)
    enc = encode_examples(train, vocab, config.max_len)
    batches = make_batches(enc, config.batch_size, shuffle_seed=0)
    return vocab, enc, batches


class TestTrainConfig:
    def test_defaults_validate(self):
        TrainConfig().validate()

    def test_round_trip(self):
        cfg = small_config(tau=0.07, k=3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_named_in_error(self):
        with pytest.raises(ValueError, match="momentum_rate"):
            TrainConfig.from_dict({"momentum_rate": 0.9})

    @pytest.mark.parametrize(
        "bad",
        [
            {"objective": "mse"},
            {"strategy": "random"},
            {"tau": 0.0},
            {"lam": 1.5},
            {"m": -0.1},
            {"q": 4, "k": 8},
            {"k": 0},
            {"batch_size": 1},
            {"epochs": 0},
            {"lr": 0.0},
            {"dropout": 1.0},
        ],
    )
    def test_invalid_values_rejected(self, bad):
        with pytest.raises(ValueError):
            small_config(**bad)


class _OneParam:
    """Minimal named-parameter holder for optimizer unit tests."""

    def __init__(self, values):
        self.w = ad.param(np.asarray(values, dtype=np.float64))

    def named(self):
        return [("w", self.w)]


class TestAdam:
    def test_first_step_hand_case(self):
        # g=1, t=1: m_hat = v_hat = 1 exactly, so the step is -lr / (1 + eps)
        p = _OneParam([0.0])
        state = init_adam(p)
        adam_step(p, {"w": np.array([1.0])}, state, lr=1e-3)
        expected = -1e-3 * (1.0 / (1.0 + 1e-8))
        np.testing.assert_allclose(p.w.values, [expected], atol=1e-18)
        assert state.t == 1

    def test_zero_gradient_is_identity(self):
        p = _OneParam([0.7, -1.2])
        before = p.w.values.copy()
        state = init_adam(p)
        adam_step(p, {"w": np.zeros(2)}, state, lr=0.5)
        np.testing.assert_array_equal(p.w.values, before)

    def test_twenty_steps_match_scalar_reference(self):
        # independent route: plain-python Adam over each coordinate
        rng = np.random.default_rng(0)
        n, lr, b1, b2, eps = 5, 3e-3, 0.9, 0.999, 1e-8
        theta = rng.normal(size=n)
        p = _OneParam(theta.copy())
        state = init_adam(p)
        ref = theta.tolist()
        m = [0.0] * n
        v = [0.0] * n
        for t in range(1, 21):
            g = rng.normal(size=n)
            adam_step(p, {"w": g}, state, lr=lr, beta1=b1, beta2=b2, eps=eps)
            for i in range(n):
                m[i] = b1 * m[i] + (1 - b1) * g[i]
                v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
                mh = m[i] / (1 - b1**t)
                vh = v[i] / (1 - b2**t)
                ref[i] -= lr * mh / (math.sqrt(vh) + eps)
        np.testing.assert_allclose(p.w.values, ref, atol=1e-12)

    def test_nonfinite_gradient_names_parameter(self):
        p = _OneParam([0.0])
        with pytest.raises(ValueError, match="'w'"):
            adam_step(p, {"w": np.array([np.nan])}, init_adam(p), lr=1e-3)


class TestTrainStep:
    def test_warmup_gate_keeps_contrastive_silent(self):
        cfg = small_config(q=64)  # 4/64 fill after the first enqueue
        train, _, _ = tiny_corpus()
        vocab, enc, batches = first_batch(cfg, train)
        state = init_state(cfg, len(vocab))
        lb = train_step(state, batches[0], cfg)
        assert lb.l_cl == 0.0
        assert lb.total == lb.l_ce
        assert state.queue.fill_fraction() < WARMUP_FILL

    def test_active_gate_builds_convex_combination(self):
        cfg = small_config(q=8)  # 4/8 fill crosses the quarter threshold at once
        train, _, _ = tiny_corpus()
        vocab, enc, batches = first_batch(cfg, train)
        state = init_state(cfg, len(vocab))
        lb = train_step(state, batches[0], cfg)
        assert lb.l_cl != 0.0
        np.testing.assert_allclose(
            lb.total, (1 - cfg.lam) * lb.l_cl + cfg.lam * lb.l_ce, atol=1e-12
        )

    def test_momentum_params_evolve_by_ema_only(self):
        cfg = small_config(q=8)
        train, _, _ = tiny_corpus()
        vocab, enc, batches = first_batch(cfg, train)
        state = init_state(cfg, len(vocab))
        before = clone_params(state.ema.params)
        train_step(state, batches[0], cfg)
        for (name, mom), (_, prev), (_, cur) in zip(
            state.ema.params.named(), before.named(), state.params.named()
        ):
            expected = prev.values.copy()
            expected *= cfg.m
            expected += (1.0 - cfg.m) * cur.values
            np.testing.assert_array_equal(mom.values, expected, err_msg=name)

    def test_momentum_frozen_at_m_one(self):
        cfg = small_config(m=1.0, q=8)
        train, _, _ = tiny_corpus()
        vocab, enc, batches = first_batch(cfg, train)
        state = init_state(cfg, len(vocab))
        before = clone_params(state.ema.params)
        for b in batches[:3]:
            train_step(state, b, cfg)
        for (name, mom), (_, prev) in zip(state.ema.params.named(), before.named()):
            np.testing.assert_array_equal(mom.values, prev.values, err_msg=name)

    def test_queue_holds_most_recent_labels_in_order(self):
        cfg = small_config(q=8)
        train, _, _ = tiny_corpus()
        vocab, enc, batches = first_batch(cfg, train)
        state = init_state(cfg, len(vocab))
        for b in batches[:3]:
            train_step(state, b, cfg)
        expected = np.concatenate([batches[1].labels, batches[2].labels])
        np.testing.assert_array_equal(state.queue.snapshot().labels, expected)

    def test_step_counter_and_breakdown(self):
        cfg = small_config()
        train, _, _ = tiny_corpus()
        vocab, enc, batches = first_batch(cfg, train)
        state = init_state(cfg, len(vocab))
        lb = train_step(state, batches[0], cfg)
        assert state.step == 1
        assert lb.lam == cfg.lam
        assert all(math.isfinite(x) for x in (lb.l_cl, lb.l_ce, lb.total))

    def test_lambda_one_walks_the_ce_trajectory(self):
        # with lam=1 the contrastive branch is weighted to zero and the main
        # dropout stream is untouched by the momentum one, so parameters must
        # match a plain classification run value for value
        train, val, _ = tiny_corpus()
        r_lahn = run_training(small_config(objective="lahn", lam=1.0, q=8), train, val)
        r_ce = run_training(small_config(objective="ce"), train, val)
        for (name, a), (_, b) in zip(r_lahn.params.named(), r_ce.params.named()):
            np.testing.assert_array_equal(a.values, b.values, err_msg=name)

    def test_nonfinite_loss_aborts_with_diagnostic(self):
        cfg = small_config()
        train, _, _ = tiny_corpus()
        vocab, enc, batches = first_batch(cfg, train)
        state = init_state(cfg, len(vocab))
        state.params.w1.values[:] = np.inf
        with pytest.raises(NonFiniteLossError) as exc, np.errstate(invalid="ignore"):
            train_step(state, batches[0], cfg)
        diag = exc.value.diagnostic
        assert set(diag) == {"step", "lr", "l_cl", "l_ce", "total"}
        assert diag["step"] == 0 and diag["lr"] == cfg.lr
        assert not math.isfinite(diag["total"])


class TestRunTraining:
    def test_record_schema_and_counts(self):
        cfg = small_config(epochs=2)
        train, val, _ = tiny_corpus()
        result = run_training(cfg, train, val)
        step_recs = [r for r in result.records if "step" in r]
        epoch_recs = [r for r in result.records if "epoch" in r]
        assert len(epoch_recs) == cfg.epochs
        n_batches = len(make_batches(encode_examples(train, result.vocab, cfg.max_len), cfg.batch_size, 0))
        assert len(step_recs) == cfg.epochs * n_batches
        assert set(step_recs[0]) == {"step", "l_cl", "l_ce", "total", "queue_fill"}
        assert set(epoch_recs[0]) == {"epoch", "val_accuracy", "val_macro_f1"}

    def test_two_runs_are_identical(self):
        cfg = small_config()
        train, val, _ = tiny_corpus()
        a = run_training(cfg, train, val)
        b = run_training(cfg, train, val)
        assert json.dumps(a.records, sort_keys=True) == json.dumps(b.records, sort_keys=True)
        for (name, ta), (_, tb) in zip(a.params.named(), b.params.named()):
            np.testing.assert_array_equal(ta.values, tb.values, err_msg=name)

    def test_best_checkpoint_tracks_max_val_f1(self):
        cfg = small_config(epochs=3)
        train, val, _ = tiny_corpus()
        result = run_training(cfg, train, val)
        epoch_recs = [r for r in result.records if "epoch" in r]
        vals = [r["val_macro_f1"] for r in epoch_recs]
        assert result.best_val_macro_f1 == max(vals)
        assert result.best_epoch == vals.index(max(vals)) + 1  # strict improvement keeps the first

    def test_artifacts_written(self, tmp_path):
        cfg = small_config()
        train, val, _ = tiny_corpus()
        result = run_training(cfg, train, val, out_dir=tmp_path)
        assert (tmp_path / "vocab.txt").exists()
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(l) for l in lines] == result.records
        for name in ("checkpoint_last.npz", "checkpoint_best.npz"):
            params, config_echo, vocab = load_checkpoint(tmp_path / name)
            assert config_echo == cfg.to_dict()
            assert vocab is not None and len(vocab) == len(result.vocab)
        best, _, _ = load_checkpoint(tmp_path / "checkpoint_best.npz")
        for (name, ta), (_, tb) in zip(best.named(), result.best_params.named()):
            np.testing.assert_array_equal(ta.values, tb.values, err_msg=name)

    def test_empty_split_rejected(self):
        train, val, _ = tiny_corpus()
        with pytest.raises(ValueError, match="nonempty"):
            run_training(small_config(), [], val)

    def test_scl_objective_runs(self):
        cfg = small_config(objective="scl", lam=0.5)
        train, val, _ = tiny_corpus()
        result = run_training(cfg, train, val)
        step_recs = [r for r in result.records if "step" in r]
        assert any(r["l_cl"] != 0.0 for r in step_recs)
        assert all(r["queue_fill"] == 0.0 for r in step_recs)  # no queue outside lahn


class TestAblationGrid:
    def test_single_cell_matches_training_run(self):
        cfg = small_config()
        train, val, _ = tiny_corpus()
        direct = run_training(TrainConfig.from_dict({**cfg.to_dict(), "seed": 5}), train, val)
        grid = run_ablation_grid(cfg, [{}], [5], train, val)
        cell = grid["cells"][0]
        assert cell["per_seed"][0]["val_macro_f1"] == direct.best_val_macro_f1
        assert cell["median_val_macro_f1"] == direct.best_val_macro_f1

    def test_three_seeds_produce_median(self):
        cfg = small_config(epochs=1)
        train, val, test = tiny_corpus()
        grid = run_ablation_grid(cfg, [{"k": 2}], [0, 1, 2], train, val, test_split=test)
        cell = grid["cells"][0]
        assert [r["seed"] for r in cell["per_seed"]] == [0, 1, 2]
        vals = sorted(r["val_macro_f1"] for r in cell["per_seed"])
        assert cell["median_val_macro_f1"] == vals[1]
        assert "median_test_macro_f1" in cell
        assert all("test_macro_f1" in r for r in cell["per_seed"])

    def test_failed_cell_marked_and_grid_continues(self):
        cfg = small_config(epochs=1)
        train, val, _ = tiny_corpus()
        grid = run_ablation_grid(cfg, [{"tau": -1.0}, {}], [0], train, val)
        bad, good = grid["cells"]
        assert "error" in bad and "ValueError" in bad["error"]
        assert "error" not in good and good["per_seed"]

    def test_empty_grid_rejected(self):
        train, val, _ = tiny_corpus()
        with pytest.raises(ValueError):
            run_ablation_grid(small_config(), [], [0], train, val)
        with pytest.raises(ValueError):
            run_ablation_grid(small_config(), [{}], [], train, val)
