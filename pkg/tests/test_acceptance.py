"""Acceptance suite: one test group per criterion, summarized at the end of the run.

Every group is tagged ``@pytest.mark.criterion(n)``; the terminal summary
prints a PASS/FAIL line for each. The OOD experiment trains 20 models and
takes a few minutes on one core.
"""
import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from hiddencut.cli import main
from hiddencut.cut import CutConfig, make_cut_hook
from hiddencut.encoder import ModelConfig, encode, init_params
from hiddencut.objectives import js_consistency, total_loss
from hiddencut.spans import SpanMask, apply_cut, candidate_set, select_start
from hiddencut.strategies import attention_scores
from hiddencut.trainkit import (
    confusion_2x2,
    evaluate,
    load_checkpoint,
    matthews_corr,
    save_checkpoint,
    spearman_corr,
)
from hiddencut.trainkit.experiments import ALPHA_GRID, BETA_GRID, STRATEGY_ROWS, RunConfig, ood_experiment
from hiddencut.trainkit.inspection import CSV_HEADER, inspect_attention

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
CASES = 1000


# -- 1: gradient correctness ------------------------------------------------

@pytest.mark.criterion(1)
def test_grad_check_full_objective(note, capsys):
    cfg = RunConfig.load(CONFIGS / "grad_check.json")
    m, s = cfg.model, cfg.grad_check_setup()
    assert (m.num_layers, m.hidden_dim, m.num_heads, s.seq_len, s.num_aug) == (2, 16, 2, 6, 2)
    assert s.eps == 1e-4 and s.num_coords >= 200
    t0 = time.perf_counter()
    rc = main(["grad-check", "--config", str(CONFIGS / "grad_check.json")])
    elapsed = time.perf_counter() - t0
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    note(f"max rel err {res['max_rel_error']:.2e} over {s.num_coords} coords in {elapsed:.1f}s")
    assert rc == 0 and res["max_rel_error"] < 1e-6
    assert elapsed < 60


# -- 2: masking invariants ----------------------------------------------------

def _array_case(rng):
    L = int(rng.integers(2, 33))
    D = int(rng.integers(1, 17))
    n = int(rng.integers(2, L + 1))
    H = rng.normal(size=(L, D))
    H[H == 0] = 0.5
    mask = np.arange(L) < n
    span = SpanMask(0, int(rng.integers(1, n)), int(rng.integers(1, n)))
    out, new = apply_cut(H, mask, span)
    stop = min(span.stop, n)
    rest = np.r_[0:span.start, stop:L]
    return (int(np.sum(out == 0)) == (stop - span.start) * D
            and out[rest].tobytes() == H[rest].tobytes()
            and not new[span.start:stop].any() and bool(new[0])
            and np.array_equal(new[rest], mask[rest]))


_MODELS = {D: (ModelConfig(num_layers=2, hidden_dim=D, num_heads=2, ffn_dim=2 * D, vocab_size=20,
                           max_len=16), None) for D in (4, 8, 16)}


def _model(D):
    cfg, params = _MODELS[D]
    if params is None:
        params = init_params(cfg, np.random.default_rng(D), std=0.3)
        _MODELS[D] = (cfg, params)
    return cfg, params


def _encoder_case(rng):
    cfg, params = _model(int(rng.choice([4, 8, 16])))
    L = int(rng.integers(2, 17))
    n = int(rng.integers(2, L + 1))
    ids = np.zeros((1, L), dtype=np.int64)
    ids[0, :n] = rng.integers(3, cfg.vocab_size, size=n)
    pad = np.arange(L)[None] < n
    cut = CutConfig(alpha=float(rng.uniform(0.05, 0.9)), beta=float(rng.uniform(0.1, 1.0)),
                    strategy=str(rng.choice(["random", "attention", "gem"])),
                    reverse=bool(rng.integers(2)))
    _, recs = encode(params, ids, pad, cfg, make_cut_hook(cut, pad, [0], [rng]))
    D = cfg.hidden_dim
    for m, rec in enumerate(recs):
        s = rec.spans[0]
        before, after = rec.pre_cut.value[0], rec.hidden[0]
        rest = np.r_[0:s.start, s.stop:L]
        if not (1 <= s.start and s.stop <= n):
            return False
        if int(np.sum((after == 0) & (before != 0))) != s.length * D or np.any(after[s.start:s.stop]):
            return False
        if after[rest].tobytes() != before[rest].tobytes():
            return False
        if m + 1 < len(recs) and np.any(recs[m + 1].attention[0, :, :, s.start:s.stop] != 0.0):
            return False
    return True


@pytest.mark.criterion(2)
def test_masking_invariants(note):
    rng = np.random.default_rng(2)
    array_fail = sum(not _array_case(rng) for _ in range(CASES))
    encoder_fail = sum(not _encoder_case(rng) for _ in range(CASES))
    note(f"{array_fail} array failures, {encoder_fail} in-encoder failures over {CASES} cases each")
    assert array_fail == 0 and encoder_fail == 0


# -- 3: attention-score oracle ----------------------------------------------

def _double_sum(A, pad):
    P, L, _ = A.shape
    out = np.zeros(L)
    for i in range(L):
        if not pad[i]:
            continue
        acc = 0.0
        for p in range(P):
            for k in range(L):
                if pad[k]:
                    acc += A[p, k, i]
        out[i] = acc / P
    return out


@pytest.mark.criterion(3)
def test_attention_score_oracle(note):
    rng = np.random.default_rng(3)
    worst_oracle = worst_sum = 0.0
    for _ in range(CASES):
        P, L = int(rng.integers(1, 5)), int(rng.integers(1, 13))
        n = int(rng.integers(1, L + 1))
        pad = np.arange(L) < n
        A = rng.random((P, L, L)) * pad
        A /= A.sum(axis=-1, keepdims=True)
        a = attention_scores(A, pad).values
        worst_oracle = max(worst_oracle, float(np.max(np.abs(a - _double_sum(A, pad)))))
        worst_sum = max(worst_sum, abs(float(a[pad].sum()) - n))
    note(f"oracle gap {worst_oracle:.1e}, mass gap {worst_sum:.1e}")
    assert worst_oracle <= 1e-9 and worst_sum <= 1e-9


# -- 4: objective identities -------------------------------------------------

@pytest.mark.criterion(4)
def test_objective_identities(note):
    rng = np.random.default_rng(4)
    for _ in range(200):
        p = rng.dirichlet(np.ones(int(rng.integers(2, 6))))
        assert js_consistency(p, [p.copy() for _ in range(int(rng.integers(1, 4)))]) == 0.0
    hand = js_consistency([1.0, 0.0], [[0.0, 1.0]])
    assert abs(hand - math.log(2)) <= 1e-9
    for _ in range(200):
        l_ori, l_js = rng.exponential(size=2)
        augs = list(rng.exponential(size=int(rng.integers(1, 4))))
        out = total_loss(l_ori, augs, l_js, gamma=1.0, eta=1.0)
        assert out.total == l_ori + sum(augs) + l_js
    note(f"identical -> 0 exactly, hand case {hand:.12f}")


# -- 5: sampling distribution ------------------------------------------------

@pytest.mark.criterion(5)
def test_sampling_distribution(note):
    draws = 100_000
    scores = np.array([0.0, 3.0, 1.0])
    valid = np.ones(3, bool)
    cands = candidate_set(scores, 1.0, valid)
    rng = np.random.default_rng(5)
    picks = np.array([select_start(cands, scores, False, rng) for _ in range(draws)])
    ratio = np.sum(picks == 1) / np.sum(picks == 2)

    scores = np.array([0.0, 5.0, 1.0, 2.0, 3.0, 4.0])
    valid = np.ones(6, bool)
    cands = candidate_set(scores, 0.2, valid)
    outside = np.setdiff1d(np.arange(1, 6), cands)
    rev = np.array([select_start(cands, scores, True, rng, valid=valid) for _ in range(draws)])
    freq = np.array([np.mean(rev == i) for i in outside])
    note(f"forward ratio {ratio:.4f}, reverse freqs {np.round(freq, 4).tolist()}")
    assert abs(ratio - 3.0) <= 0.02 * 3.0
    assert np.isin(rev, outside).all()
    assert np.all(np.abs(freq - 1 / outside.size) <= 0.02 / outside.size)


# -- 6: spurious-correlation OOD experiment -----------------------------------

@pytest.mark.slow
@pytest.mark.criterion(6)
def test_ood_experiment(note):
    cfg = RunConfig.load(CONFIGS / "ood.json")
    b, c, m = cfg.benchmark, cfg.train.cut, cfg.model
    assert (b.rho_train, b.rho_ood, b.k, b.n_train, b.n_dev, b.n_ood) == (0.95, 0.0, 3, 2000, 500, 500)
    assert (m.num_layers, m.hidden_dim, m.num_heads, cfg.train.epochs) == (2, 32, 2, 5)
    assert (c.strategy.value, c.alpha, c.beta, c.num_aug, c.active) == ("attention", 0.1, 0.4, 1, True)
    assert (cfg.train.gamma, cfg.train.eta, len(cfg.seeds)) == (1.0, 1.0, 10)
    res = ood_experiment(cfg, cfg.seeds, c)
    note(f"dev {res.base[:, 0].mean():.4f}->{res.cut[:, 0].mean():.4f}, "
         f"ood {res.base[:, 1].mean():.4f}->{res.cut[:, 1].mean():.4f}, "
         f"wins {res.wins}/{res.wins + res.losses}, p={res.p_value:.4f}, {res.seconds / 60:.1f} min")
    assert abs(res.dev_gap) <= 0.02
    assert res.ood_gain > 0
    assert res.p_value < 0.1
    assert res.seconds < 90 * 60


# -- 7: ablation harness -----------------------------------------------------

ABLATION = {
    "model": {"num_layers": 2, "hidden_dim": 16, "num_heads": 2, "ffn_dim": 32, "max_len": 20},
    "train": {"epochs": 3, "batch_size": 16, "peak_lr": 4e-3, "lime_perturb": 100, "lime_epochs": 50},
    "cut": {"alpha": 0.1, "beta": 0.4, "strategy": "attention"},
    "benchmark": {"n_train": 160, "n_dev": 80, "n_ood": 80},
    "seeds": [0, 1, 2],
}


@pytest.fixture(scope="module")
def ablation_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablate")
    spec = root / "spec.json"
    spec.write_text(json.dumps(ABLATION["benchmark"]))
    assert main(["gen-data", "--spec", str(spec), "--out", str(root / "data")]) == 0
    cfg = root / "run.json"
    cfg.write_text(json.dumps({**ABLATION, "data": str(root / "data")}))
    return root, cfg


@pytest.mark.criterion(7)
@pytest.mark.parametrize("grid, names", [
    ("strategy", [name for name, _ in STRATEGY_ROWS]),
    ("alpha", [f"{a:g}" for a in ALPHA_GRID]),
    ("beta", [f"{b:g}" for b in BETA_GRID]),
])
def test_ablation_grid(ablation_data, grid, names, note):
    root, cfg = ablation_data
    out = root / grid
    assert main(["ablate", "--config", str(cfg), "--grid", grid, "--out", str(out)]) == 0
    with open(out / f"ablation_{grid}.csv", newline="") as fh:
        detail = list(csv.reader(fh))
    assert detail[0] == ["grid", "setting", "seed", "dev_acc", "ood_acc"]
    rows = detail[1:]
    assert [(r[1], int(r[2])) for r in rows] == [(n, s) for n in names for s in (0, 1, 2)]
    assert all(r[0] == grid and 0.0 <= float(r[3]) <= 1.0 and 0.0 <= float(r[4]) <= 1.0 for r in rows)
    with open(out / f"ablation_{grid}_summary.csv", newline="") as fh:
        summary = list(csv.DictReader(fh))
    assert [r["setting"] for r in summary] == names
    assert all(int(r["seeds"]) == 3 and math.isfinite(float(r["ood_mean"])) for r in summary)
    note(f"{grid}: {len(names)} rows x 3 seeds")
    if grid == "alpha":
        assert [float(n) for n in names] == [0.05, 0.1, 0.2, 0.3, 0.4]
    if grid == "beta":
        assert [float(n) for n in names] == [0.1, 0.2, 0.4, 0.6]


# -- 8 / 10: determinism, persistence, inspection ----------------------------

SMALL = {
    "model": {"num_layers": 2, "hidden_dim": 16, "num_heads": 2, "ffn_dim": 32, "max_len": 20},
    "train": {"epochs": 2, "batch_size": 16, "peak_lr": 4e-3, "seed": 7},
    "cut": {"alpha": 0.1, "beta": 0.4, "strategy": "attention", "num_aug": 2},
    "benchmark": {"n_train": 200, "n_dev": 100, "n_ood": 100, "seed": 1},
}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("persist")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(SMALL))
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(root / name)]) == 0
    return root, RunConfig.from_dict(SMALL)


@pytest.mark.criterion(8)
def test_identical_runs_identical_logs(trained, note):
    root, _ = trained
    a, b = (root / n / "metrics.jsonl" for n in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    assert (root / "a" / "model.hcut").read_bytes() == (root / "b" / "model.hcut").read_bytes()
    note(f"metrics logs identical ({len(a.read_bytes())} bytes)")


@pytest.mark.criterion(8)
def test_checkpoint_round_trip(trained, note):
    root, run = trained
    first = root / "a" / "model.hcut"
    ck = load_checkpoint(first)
    again = save_checkpoint(root / "again.hcut", ck.params, ck.model, ck.train, ck.vocab)
    assert first.read_bytes() == again.read_bytes()
    _, _, examples = run.datasets()
    before = evaluate(ck.params, ck.model, examples["dev"])
    after = evaluate(load_checkpoint(again).params, ck.model, examples["dev"])
    logged = json.loads((root / "a" / "metrics.jsonl").read_text().splitlines()[-1])["dev_acc"]
    assert before == after == logged
    note(f"save->load->save byte-identical, dev acc {after} unchanged")


@pytest.mark.criterion(10)
def test_attention_inspection(trained, note):
    root, _ = trained
    ck = load_checkpoint(root / "a" / "model.hcut")
    index = {t: i for i, t in enumerate(ck.vocab)}
    worst = 0.0
    _, _, examples = RunConfig.from_dict(SMALL).datasets()
    for k, ex in enumerate(examples["dev"][:50]):
        out = root / f"att{k}.csv"
        rows = inspect_attention(ck.params, ck.model, ex.ids, out, [ck.vocab[i] for i in ex.ids])
        worst = max(worst, abs(sum(r.weight for r in rows) - 1.0))
        with open(out, newline="") as fh:
            table = list(csv.reader(fh))
        assert tuple(table[0]) == CSV_HEADER == ("token", "position", "weight")
        assert [int(r[1]) for r in table[1:]] == list(range(len(ex.ids)))
        assert [index[r[0]] for r in table[1:]] == list(ex.ids)
    note(f"weights sum to 1 within {worst:.1e} on 50 examples")
    assert worst <= 1e-9


@pytest.mark.criterion(10)
def test_inspect_attention_cli(trained, tmp_path):
    root, _ = trained
    out = tmp_path / "att.csv"
    text = "the quick brown fox"      # out-of-vocabulary words map to <unk>
    assert main(["inspect-attention", "--checkpoint", str(root / "a" / "model.hcut"),
                 "--text", text, "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["token", "position", "weight"]
    assert abs(sum(float(r[2]) for r in table[1:]) - 1.0) <= 1e-9


# -- 9: metric units -----------------------------------------------------------

@pytest.mark.criterion(9)
def test_metric_hand_cases(note):
    assert matthews_corr(*confusion_2x2([1, 0, 1, 0], [1, 0, 1, 0])) == 1.0
    assert matthews_corr(*confusion_2x2([1, 1, 1, 1], [1, 0, 1, 0])) == 0.0
    mcc = matthews_corr(6, 3, 1, 2)
    assert abs(mcc - 0.478) <= 1e-3
    assert spearman_corr([3, 1, 2], [3, 1, 2]).value == 1.0
    assert abs(spearman_corr([1, 2, 3, 4], [4, 3, 2, 1]).value + 1.0) <= 1e-12
    flat = spearman_corr([1, 2, 3], [7, 7, 7])
    assert flat.value == 0.0 and flat.degenerate
    # average ranks [1, 2.5, 2.5, 4] vs [1, 2, 3, 4]: Pearson = 4.5 / sqrt(4.5 * 5) = 3 / sqrt(10)
    rho = spearman_corr([1, 2, 2, 3], [1, 2, 3, 4]).value
    assert abs(rho - 0.9486832980505138) <= 1e-12
    note(f"mcc {mcc:.4f}, tie-case rho {rho!r}")
