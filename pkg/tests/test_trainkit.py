import json
import math
import struct

import numpy as np
import pytest

from hiddencut.cut import CutConfig
from hiddencut.data import Record, SpuriousSpec, generate_spurious_benchmark
from hiddencut.encoder import ModelConfig, forward_logits, init_params
from hiddencut.errors import ConfigError, CorruptionError, FormatError, NumericError, ValidationError
from hiddencut.numerics import autodiff as ad
from hiddencut.objectives import cross_entropy_node
from hiddencut.trainkit import (
    AdamState,
    TrainConfig,
    accuracy,
    adam_step,
    confusion_2x2,
    evaluate,
    load_checkpoint,
    lr_at,
    make_batch,
    matthews_corr,
    prepare_data,
    save_checkpoint,
    spearman_corr,
    train,
)
from hiddencut.trainkit.experiments import RunConfig, grid_settings, sign_test_p
from hiddencut.trainkit.inspection import CSV_HEADER, inspect_attention, start_token_attention
from hiddencut.trainkit.optim import warmup_steps


class TestSchedule:
    def test_endpoints(self):
        assert lr_at(0, 100, 1e-5, 0.06) == 0.0
        assert lr_at(6, 100, 1e-5, 0.06) == 1e-5
        assert lr_at(100, 100, 1e-5, 0.06) == 0.0

    def test_closed_form(self):
        assert abs(lr_at(53, 100, 1e-5, 0.06) - 1e-5 * (100 - 53) / (100 - 6)) < 1e-20

    def test_continuous_at_junction(self):
        for total in (17, 100, 313):
            w = warmup_steps(total, 0.06)
            left = lr_at(w - 1, total, 1.0, 0.06) + 1.0 / w
            right = lr_at(w + 1, total, 1.0, 0.06) + 1.0 / (total - w)
            assert abs(left - 1.0) < 1e-12 and abs(right - 1.0) < 1e-12

    def test_no_warmup(self):
        assert lr_at(0, 10, 2.0, 0.0) == 2.0

    def test_range(self):
        with pytest.raises(ValueError):
            lr_at(11, 10, 1.0, 0.1)


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        st = AdamState(m={"w": np.array([0.5, 0.5])}, v={"w": np.array([1.0, 1.0])}, step=3)
        adam_step(p, {"w": np.zeros(2)}, st, lr=0.1)
        # step 4 moves by m_hat/(sqrt(v_hat)+eps) with the decayed moments
        m = 0.9 * 0.5
        v = 0.999 * 1.0
        delta = 0.1 * (m / (1 - 0.9 ** 4)) / (math.sqrt(v / (1 - 0.999 ** 4)) + 1e-8)
        np.testing.assert_allclose(p["w"], [1.0 - delta, -2.0 - delta], rtol=1e-15)
        np.testing.assert_allclose(st.m["w"], m) and np.testing.assert_allclose(st.v["w"], v)

    def test_fresh_zero_gradient_unchanged(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
        assert p["w"].tolist() == [1.0, -2.0]

    def test_first_step_closed_form(self):
        g = np.array([0.3, -4.0, 1e-3])
        p = {"w": np.zeros(3)}
        adam_step(p, {"w": g}, AdamState(), lr=0.01)
        # m_hat = g, v_hat = g^2 after bias correction
        expected = -0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p["w"], expected, rtol=1e-12)

    def test_nonfinite_leaves_state_untouched(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        st = AdamState()
        with pytest.raises(NumericError):
            adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, st, lr=0.1)
        assert p["a"].tolist() == [1.0, 1.0] and st.step == 0 and not st.m

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(0)
            p = {"w": rng.normal(size=5)}
            st = AdamState()
            for _ in range(10):
                adam_step(p, {"w": rng.normal(size=5)}, st, lr=0.05)
            return p["w"].tobytes()
        assert run() == run()


class TestMetrics:
    def test_accuracy(self):
        assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
        assert accuracy([1, 0, 0], [1, 1, 0]) == 2 / 3
        y = np.array([0, 1] * 10)
        pred = np.array([0, 1] * 7 + [1, 0] * 3)
        assert accuracy(1 - pred, y) == pytest.approx(1 - accuracy(pred, y), abs=1e-15)

    def test_mcc(self):
        assert matthews_corr(5, 5, 0, 0) == 1.0
        assert matthews_corr(*confusion_2x2([1, 1, 1, 1], [1, 0, 1, 0])) == 0.0
        assert abs(matthews_corr(6, 3, 1, 2) - 0.478) < 1e-3
        expected = (6 * 3 - 1 * 2) / math.sqrt(7 * 8 * 4 * 5)
        assert matthews_corr(6, 3, 1, 2) == expected

    def test_confusion(self):
        assert confusion_2x2([1, 0, 1, 0], [1, 0, 0, 1]) == (1, 1, 1, 1)

    def test_spearman(self):
        assert spearman_corr([1, 2, 3], [1, 2, 3]).value == 1.0
        assert abs(spearman_corr([1, 2, 3, 4], [4, 3, 2, 1]).value + 1.0) < 1e-15
        flat = spearman_corr([1, 2, 3], [5, 5, 5])
        assert flat == (0.0, True)

    def test_spearman_tie_oracle(self):
        # ranks [1, 2.5, 2.5, 4] against [1, 2, 3, 4], then Pearson by hand
        rx, ry = [1.0, 2.5, 2.5, 4.0], [1.0, 2.0, 3.0, 4.0]
        mx, my = sum(rx) / 4, sum(ry) / 4
        cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
        vx = sum((a - mx) ** 2 for a in rx)
        vy = sum((b - my) ** 2 for b in ry)
        oracle = cov / math.sqrt(vx * vy)
        assert abs(spearman_corr([1, 2, 2, 3], [1, 2, 3, 4]).value - oracle) < 1e-12


@pytest.fixture(scope="module")
def tiny():
    spec = SpuriousSpec(n_train=96, n_dev=40, n_ood=40, signal_per_class=8, neutral_tokens=10)
    splits = generate_spurious_benchmark(spec)
    model = ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=24, max_len=20)
    return prepare_data(splits, model)


class TestTrain:
    def test_reference_loop_equivalence(self, tiny):
        _, cfg, ex = tiny
        run = TrainConfig(epochs=2, batch_size=16, seed=3, gamma=0.0, eta=0.0)
        params, report = train(run, cfg, ex)

        # a plain fine-tuning loop that never touches the cut code
        p = init_params(cfg, np.random.default_rng([3, 0xC0DE]), run.init_std)
        state = AdamState()
        n, steps = len(ex["train"]), (len(ex["train"]) + 15) // 16
        total, step = steps * 2, 0
        for epoch in range(2):
            order = np.random.default_rng([3, epoch, 0x5EED]).permutation(n)
            loss_sum = 0.0
            for s in range(steps):
                b = make_batch([ex["train"][i] for i in order[s * 16:(s + 1) * 16]])
                leaves = {k: ad.param(v) for k, v in p.items()}
                logits, _ = forward_logits(leaves, b.ids, b.pad_mask, cfg)
                ce = cross_entropy_node(logits, b.labels)
                ad.backward(ad.mean_all(ce))
                step += 1
                grads = {k: (l.grad if l.grad is not None else np.zeros_like(l.value)) for k, l in leaves.items()}
                adam_step(p, grads, state, lr_at(step, total, run.peak_lr, run.warmup_ratio))
                loss_sum += float(ce.value.mean()) * len(b)
            assert report.records[epoch]["l_ori"] == loss_sum / n
        assert all(p[k].tobytes() == params[k].tobytes() for k in p)

    def test_disabled_cut_ignores_weights(self, tiny):
        _, cfg, ex = tiny
        a = train(TrainConfig(epochs=1, batch_size=32, gamma=0.0, eta=0.0), cfg, ex)[1]
        b = train(TrainConfig(epochs=1, batch_size=32, gamma=3.0, eta=2.0), cfg, ex)[1]
        assert a.to_jsonl() == b.to_jsonl()

    @pytest.mark.parametrize("cut", [CutConfig(alpha=0.2), CutConfig(strategy="gradient", num_aug=2),
                                     CutConfig(strategy="gem", reverse=True), CutConfig(strategy="lime"),
                                     CutConfig(dropblock=True)])
    def test_metrics_log_byte_identical(self, tiny, tmp_path, cut):
        _, cfg, ex = tiny
        run = TrainConfig(epochs=2, batch_size=32, seed=1, cut=cut, lime_perturb=100, lime_epochs=20)
        train(run, cfg, ex, metrics_path=tmp_path / "a.jsonl")
        train(run, cfg, ex, metrics_path=tmp_path / "b.jsonl")
        a = (tmp_path / "a.jsonl").read_bytes()
        assert a == (tmp_path / "b.jsonl").read_bytes()
        recs = [json.loads(line) for line in a.decode().splitlines()]
        assert [r["epoch"] for r in recs] == [1, 2] and recs[1]["step"] == 6
        assert set(recs[0]) == {"epoch", "step", "l_ori", "l_aug", "l_js", "train_acc", "dev_acc", "ood_acc"}
        assert recs[0]["l_aug"] > 0 and recs[0]["l_js"] >= 0

    def test_separable_toy_reaches_full_dev(self):
        recs = [Record(f"a{i % 5} x y" if i % 2 == 0 else f"b{i % 5} y x", i % 2) for i in range(80)]
        _, cfg, ex = prepare_data({"train": recs, "dev": recs[:20]},
                                  ModelConfig(num_layers=1, hidden_dim=16, num_heads=2, ffn_dim=16, max_len=8))
        _, report = train(TrainConfig(epochs=8, batch_size=8, peak_lr=5e-3), cfg, ex)
        assert report.records[-1]["dev_acc"] == 1.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_aborts_with_record(self, tiny, tmp_path):
        _, cfg, ex = tiny
        params = init_params(cfg, np.random.default_rng(0))
        params["cls_b"] = np.array([np.inf, 0.0])
        with pytest.raises(NumericError):
            train(TrainConfig(epochs=1), cfg, ex, params=params, metrics_path=tmp_path / "m.jsonl")
        rec = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[-1])
        assert rec["event"] == "abort" and rec["step"] == 0

    def test_evaluate_invariant_to_batching(self, tiny):
        _, cfg, ex = tiny
        params, _ = train(TrainConfig(epochs=1, batch_size=32), cfg, ex)
        dev = ex["dev"]
        base = evaluate(params, cfg, dev)
        rev = list(reversed(dev))
        assert evaluate(params, cfg, dev, batch_size=1) == base
        assert evaluate(params, cfg, rev, batch_size=7) == base

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup_ratio=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(peak_lr=0)
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"lr": 1})
        assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tiny, tmp_path):
        vocab, cfg, ex = tiny
        params, _ = train(TrainConfig(epochs=1, batch_size=32), cfg, ex)
        path = save_checkpoint(tmp_path / "m.hcut", params, cfg, TrainConfig().to_dict(), vocab.tokens)
        return path, params, cfg, ex

    def test_round_trip_bytes_and_metrics(self, saved, tmp_path):
        path, params, cfg, ex = saved
        ck = load_checkpoint(path)
        again = save_checkpoint(tmp_path / "again.hcut", ck.params, ck.model, ck.train, ck.vocab)
        assert path.read_bytes() == again.read_bytes()
        assert all(ck.params[k].tobytes() == params[k].tobytes() for k in params)
        assert evaluate(ck.params, ck.model, ex["ood"]) == evaluate(params, cfg, ex["ood"])
        assert ck.model == cfg

    def test_header_byte_corruption(self, saved):
        path = saved[0]
        data = bytearray(path.read_bytes())
        data[30] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic_and_version(self, saved):
        path = saved[0]
        data = path.read_bytes()
        path.write_bytes(b"XCUT" + data[4:])
        with pytest.raises(FormatError):
            load_checkpoint(path)
        path.write_bytes(data[:4] + struct.pack("<I", 2) + data[8:])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated(self, saved):
        path = saved[0]
        data = path.read_bytes()
        for cut in (3, 20, len(data) - 8):
            path.write_bytes(data[:cut])
            with pytest.raises(CorruptionError):
                load_checkpoint(path)

    def test_manifest_shape_mismatch(self, saved, tmp_path):
        path, params, cfg, _ = saved
        bad = dict(params, cls_w=np.zeros((cfg.hidden_dim + 1, 2)))
        from hiddencut.trainkit import checkpoint as ck

        data = ck._encode(bad, cfg, {}, None)
        (tmp_path / "bad.hcut").write_bytes(data)
        with pytest.raises(ValidationError):
            load_checkpoint(tmp_path / "bad.hcut")


class TestInspection:
    def test_single_position(self, small_cfg, small_params, tmp_path):
        rows = inspect_attention(small_params, small_cfg, [1], tmp_path / "a.csv")
        assert len(rows) == 1 and rows[0].weight == 1.0

    def test_uniform_hand_model(self, small_cfg, small_params):
        p = dict(small_params)
        for m in range(small_cfg.num_layers):
            p[f"layer{m}.wq"] = np.zeros_like(p[f"layer{m}.wq"])
            p[f"layer{m}.bq"] = np.zeros_like(p[f"layer{m}.bq"])
        rows = start_token_attention(p, small_cfg, [1, 5, 6, 7, 2])
        np.testing.assert_allclose([r.weight for r in rows], 0.2, atol=1e-15)

    def test_csv_schema_and_determinism(self, tiny, tmp_path):
        vocab, cfg, ex = tiny
        params, _ = train(TrainConfig(epochs=1, batch_size=32), cfg, ex)
        ids = ex["dev"][0].ids
        toks = [vocab.token(i) for i in ids]
        inspect_attention(params, cfg, ids, tmp_path / "a.csv", toks)
        inspect_attention(params, cfg, ids, tmp_path / "b.csv", toks)
        text = (tmp_path / "a.csv").read_text()
        assert text == (tmp_path / "b.csv").read_text()
        lines = text.splitlines()
        assert tuple(lines[0].split(",")) == CSV_HEADER
        body = [line.split(",") for line in lines[1:]]
        assert [int(r[1]) for r in body] == list(range(len(ids)))
        assert [r[0] for r in body] == toks
        assert abs(sum(float(r[2]) for r in body) - 1.0) < 1e-9


class TestExperiments:
    def test_sign_test(self):
        assert sign_test_p(8, 2) == pytest.approx(56 / 1024)
        assert sign_test_p(7, 3) == pytest.approx(176 / 1024)
        assert sign_test_p(0, 0) == 1.0
        assert sign_test_p(10, 0) == 1 / 1024

    def test_grids(self):
        names = [n for n, _ in grid_settings("strategy", CutConfig())]
        assert names == ["Random", "LIME", "LIME-R", "GEM", "GEM-R", "Gradient", "Gradient-R",
                         "Attention", "Attention-R", "DropBlock"]
        assert all(c.label == n for n, c in grid_settings("strategy", CutConfig()))
        assert [c.alpha for _, c in grid_settings("alpha", CutConfig())] == [0.05, 0.1, 0.2, 0.3, 0.4]
        assert [c.beta for _, c in grid_settings("beta", CutConfig())] == [0.1, 0.2, 0.4, 0.6]
        with pytest.raises(ConfigError):
            grid_settings("gamma", CutConfig())

    def test_run_config_round_trip(self, tmp_path):
        d = {"model": {"hidden_dim": 16}, "train": {"epochs": 2}, "cut": {"alpha": 0.2},
             "benchmark": {"n_train": 50}, "seeds": [4, 5]}
        cfg = RunConfig.from_dict(d)
        assert cfg.model.hidden_dim == 16 and cfg.train.cut.alpha == 0.2 and cfg.train.cut.enabled
        assert RunConfig.from_dict(cfg.to_dict()) == cfg
        for bad in ({"modle": {}}, {"model": {"width": 3}}, {"seeds": [-1]}, {"cut": {"alpha": 2}}):
            with pytest.raises(ConfigError):
                RunConfig.from_dict(bad)
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "bad.json")


