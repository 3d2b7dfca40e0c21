import copy
import csv
import json
import math

import numpy as np
import pytest
from scipy.optimize import minimize

from ultrahstu.checkpoint import load_checkpoint, save_checkpoint
from ultrahstu.cli import main
from ultrahstu.dataset import Record, chronological_split, read_jsonl, write_jsonl
from ultrahstu.errors import ConfigError, DomainError, TrainingDivergedError
from ultrahstu.harness.config import TrainConfig, load_train_config, write_toml
from ultrahstu.harness.kuairand import KuaiRandSchema, ingest_kuairand
from ultrahstu.harness.optim import Adam
from ultrahstu.harness.synthetic import (
    SyntheticSpec,
    analytic_base_rates,
    bayes_ne,
    generate_synthetic,
    observed_base_rates,
    planted_features,
)
from ultrahstu.harness.train import LengthSampler, evaluate, init_model, train
from ultrahstu.metrics_scaling import normalized_entropy


def small_raw(**sections):
    raw = {
        "run": {"seed": 3},
        "model": {"d": 8, "num_heads": 2, "task_count": 2,
                  "stages": [{"n_layers": 1, "mask": {"kind": "semi_local", "k1": 4, "k2": 1}}]},
        "data": {"batch_size": 8, "steps": 12, "synthetic": {"n_users": 200}},
        "optim": {"lr": 3e-3},
        "eval": {"interval": 6},
    }
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    return raw


def small_cfg(**sections):
    return TrainConfig.from_dict(small_raw(**sections))


# ---------------------------------------------------------------------------
# synthetic data


def test_same_seed_gives_identical_files(tmp_path):
    spec = SyntheticSpec(n_users=300)
    write_jsonl(tmp_path / "a.jsonl", generate_synthetic(spec, 11))
    write_jsonl(tmp_path / "b.jsonl", generate_synthetic(spec, 11))
    write_jsonl(tmp_path / "c.jsonl", generate_synthetic(spec, 12))
    a, b, c = ((tmp_path / n).read_bytes() for n in ("a.jsonl", "b.jsonl", "c.jsonl"))
    assert a == b and a != c
    assert [r.items for r in read_jsonl(tmp_path / "a.jsonl")] == [r.items for r in generate_synthetic(spec, 11)]


def test_base_rates_match_analytic_rule():
    spec = SyntheticSpec(n_users=50_000)
    labels = np.asarray([row for r in generate_synthetic(spec, 0) for row in r.labels], float)
    # independent closed form: P(category seen among the last K) averaged over uniform history lengths
    ns = np.arange(8, 33)
    expected = [np.mean(1 - (15 / 16) ** np.minimum(ns, 8)), np.mean(1 - (1 - 0.3 / 16) ** np.minimum(ns, 8))]
    assert np.allclose(analytic_base_rates(spec), expected, rtol=1e-12)
    assert np.all(np.abs(labels.mean(0) / expected - 1) <= 0.02)
    assert np.all((labels.mean(0) > 0.02) & (labels.mean(0) < 0.5))


def test_bayes_ne_closed_form():
    assert np.all(bayes_ne(SyntheticSpec()) == 0.0)
    spec = SyntheticSpec(n_users=40_000, noise=0.1)
    records = generate_synthetic(spec, 1)
    truth = np.concatenate([planted_features(r, spec) for r in records])
    labels = np.asarray([row for r in records for row in r.labels], float)
    bayes_pred = np.where(truth == 1, 0.9, 0.1)
    for t in range(2):
        ne = normalized_entropy(labels[:, t], bayes_pred[:, t])
        assert abs(ne - bayes_ne(spec)[t]) <= 0.02
    assert np.all(np.abs(labels.mean(0) - observed_base_rates(spec)) <= 0.01)


def _logistic_ne(x, y):
    design = np.c_[np.ones(len(x)), x]

    def loss(w):
        z = design @ w
        return np.mean(np.logaddexp(0, z) - y * z)

    w = minimize(loss, np.zeros(2), method="BFGS").x
    return normalized_entropy(y, 1 / (1 + np.exp(-(design @ w))))


def test_planted_signal_auditor():
    spec = SyntheticSpec(n_users=5000, window=8)
    records = generate_synthetic(spec, 2)
    truth = np.concatenate([planted_features(r, spec) for r in records])
    labels = np.asarray([row for r in records for row in r.labels], float)
    for t in range(2):
        assert _logistic_ne(truth[:, t], labels[:, t]) < 0.9
        assert normalized_entropy(labels[:, t], np.full(len(labels), labels[:, t].mean())) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# KuaiRand-style ingestion

HEADER = ["user_id", "video_id", "time_ms", "is_click", "is_like", "is_follow", "is_comment", "is_forward",
          "long_view"]


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        w.writerows(rows)


def test_toy_csv_single_user(tmp_path):
    _write_csv(tmp_path / "k.csv", [[7, "a", 10, 1, 0, 0, 0, 0, 1], [7, "b", 20, 0, 1, 0, 0, 0, 0],
                                    [7, "c", 30, 1, 0, 0, 0, 0, 0]])
    records, report = ingest_kuairand(tmp_path / "k.csv")
    assert report.n_users == 1 and len(records) == 1
    r = records[0]
    assert len(r.items) + len(r.candidates) == 3
    assert r.timestamps == sorted(r.timestamps) and r.timestamps[-1] <= r.request_time
    assert r.actions == [[0, 5], [1]]
    assert r.labels == [[1, 0]]


def test_rows_sorted_per_user_stable_on_ties(tmp_path):
    rows = [[1, "x", 30, 0, 0, 0, 0, 0, 0], [1, "y", 10, 0, 0, 0, 0, 0, 0], [1, "z", 10, 0, 0, 0, 0, 0, 0],
            [1, "w", 5, 0, 0, 0, 0, 0, 0], [1, "v", 40, 1, 0, 0, 0, 0, 0]]
    _write_csv(tmp_path / "k.csv", rows)
    records, report = ingest_kuairand(tmp_path / "k.csv")
    index = report.item_index
    assert records[0].items == [index["w"], index["y"], index["z"], index["x"]]
    assert records[0].candidates == [index["v"]]


def test_counts_match_scripted_oracle(tmp_path):
    rng = np.random.default_rng(0)
    users = rng.integers(0, 10, 1000)
    rows = [[u, f"i{rng.integers(50)}", int(rng.integers(1e6)), *rng.integers(0, 2, 6)] for u in users]
    _write_csv(tmp_path / "k.csv", rows)
    records, _ = ingest_kuairand(tmp_path / "k.csv", max_length=256)
    expected = {u: min(int((users == u).sum()), 256) for u in np.unique(users)}
    assert {r.user_id: len(r.items) + len(r.candidates) for r in records} == expected


def test_malformed_rows_reported_and_threshold(tmp_path):
    rows = [[1, "a", 1, 0, 0, 0, 0, 0, 0]] * 200 + [[1, "b", "oops", 0, 0, 0, 0, 0, 0]]
    _write_csv(tmp_path / "k.csv", rows)
    _, report = ingest_kuairand(tmp_path / "k.csv")
    assert [line for line, _ in report.errors] == [202]
    _write_csv(tmp_path / "bad.csv", rows[:20] + rows[-1:] * 5)
    with pytest.raises(DomainError, match="line 22"):
        ingest_kuairand(tmp_path / "bad.csv")


def test_custom_schema(tmp_path):
    with open(tmp_path / "k.csv", "w") as fh:
        fh.write("uid,item,ts,clk\n1,3,1,1\n1,4,2,0\n")
    schema = KuaiRandSchema("uid", "item", "ts", {"clk": 0}, ["clk"])
    records, _ = ingest_kuairand(tmp_path / "k.csv", schema)
    assert records[0].labels == [[0]] and records[0].actions == [[0]]


# ---------------------------------------------------------------------------
# config, checkpoint, dataset


def test_config_round_trip(tmp_path):
    cfg = small_cfg(sl={"enabled": True, "lbsl": True, "world_size": 2})
    path = write_toml(cfg.to_dict(), tmp_path / "c.toml")
    assert load_train_config(path) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(small_raw(optim={"momentum": 0.9}))
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"data": {}})
    with pytest.raises(ConfigError):
        small_cfg(sl={"lbsl": True, "mode": "per_user"})


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 4)), "b/c": np.arange(5, dtype=np.int64), "f": np.float32([1.5, -2])}
    save_checkpoint(tmp_path / "ck.bin", tensors, {"step": 4})
    back, meta = load_checkpoint(tmp_path / "ck.bin")
    assert meta == {"step": 4}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)
    (tmp_path / "junk.bin").write_bytes(b"\x00" * 32)
    with pytest.raises(DomainError):
        load_checkpoint(tmp_path / "junk.bin")


def test_chronological_split_is_strict():
    recs = [Record(i, [], [], [], [0], [[0]], request_time=t) for i, t in enumerate([5, 1, 3, 3, 3, 9, 7, 2])]
    train_set, eval_set = chronological_split(recs, 0.5)
    assert max(r.request_time for r in train_set) < min(r.request_time for r in eval_set)
    assert len(train_set) + len(eval_set) == len(recs)


def test_read_jsonl_reports_line(tmp_path):
    write_jsonl(tmp_path / "d.jsonl", generate_synthetic(SyntheticSpec(n_users=3), 0))
    with open(tmp_path / "d.jsonl", "a") as fh:
        fh.write('{"user_id": 1}\n')
    with pytest.raises(DomainError, match=":4:"):
        read_jsonl(tmp_path / "d.jsonl")


def test_adam_single_step():
    p = {"w": np.array([1.0, -2.0])}
    Adam(lr=0.1).step(p, {"w": np.array([0.5, -0.25])})
    # first step: m_hat = g, v_hat = g^2, so the update is lr * sign(g) up to eps
    assert np.allclose(p["w"], [0.9, -1.9], atol=1e-6)


# ---------------------------------------------------------------------------
# training


def test_lr_zero_leaves_parameters_unchanged():
    cfg = small_cfg(optim={"lr": 0.0})
    records = generate_synthetic(cfg.data.synthetic_spec, cfg.seed)
    before = init_model(cfg, {"item": 64, "action": 4})
    res = train(cfg, records=records, vocab={"item": 64, "action": 4}, params=copy.deepcopy(before))
    assert all(np.array_equal(before[k], res.params[k]) for k in before)


def test_remat_and_standard_runs_agree():
    a = train(small_cfg(numerics={"remat": False}))
    b = train(small_cfg(numerics={"remat": True}))
    assert len(a.metrics) == len(b.metrics) > 0
    for x, y in zip(a.metrics, b.metrics):
        assert abs(x["ne"] - y["ne"]) <= 1e-10
    assert np.max(np.abs(np.subtract(a.losses, b.losses))) <= 1e-10


def test_lbsl_serial_and_parallel_ranks_agree():
    sl = {"enabled": True, "lbsl": True, "world_size": 4, "warmup_steps": 3, "recal_interval": 2, "l_sl": 10}
    a = train(small_cfg(sl=sl))
    b = train(small_cfg(sl=dict(sl, workers=4)))
    assert a.losses == b.losses
    assert [m["ne"] for m in a.metrics] == [m["ne"] for m in b.metrics]
    assert all(m["balance_ratio"] >= 1.0 for m in a.metrics)


def test_wide_semi_local_window_trains_like_causal():
    # synthetic histories hold at most 32 events plus one candidate
    raw = small_raw()
    raw["model"]["stages"][0]["mask"] = {"kind": "semi_local", "k1": 20, "k2": 12}
    a = train(TrainConfig.from_dict(raw))
    raw["model"]["stages"][0]["mask"] = {"kind": "causal"}
    b = train(TrainConfig.from_dict(raw))
    assert a.losses == b.losses


def test_sampled_lengths_never_exceed_raw():
    cfg = small_cfg(sl={"enabled": True, "lbsl": True, "world_size": 2, "warmup_steps": 2, "l_sl": 6})
    records = generate_synthetic(cfg.data.synthetic_spec, 0)
    sampler = LengthSampler(cfg, 32)
    for step in range(1, 8):
        ranks = [records[step * 16 + r * 8 : step * 16 + (r + 1) * 8] for r in range(2)]
        keeps, loads = sampler(step, ranks)
        for recs, ks in zip(ranks, keeps):
            for rec, k in zip(recs, ks):
                assert k.size <= len(rec.items)
    per_user = small_cfg(sl={"enabled": True, "mode": "per_user", "alpha": 1.5})
    keeps, _ = LengthSampler(per_user, 32)(1, [records[:8]])
    assert all(k.size == min(len(r.items), round(len(r.items) ** 0.75)) for r, k in zip(records[:8], keeps[0]))


def test_nan_loss_aborts_with_dump(tmp_path):
    cfg = small_cfg()
    vocab = {"item": 64, "action": 4}
    params = init_model(cfg, vocab)
    params["head/b"][:] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train(cfg, tmp_path, params=params, vocab=vocab, records=generate_synthetic(cfg.data.synthetic_spec, 0))
    assert info.value.batch_id == (1, 0)
    assert json.loads(open(info.value.dump_path).read())["step"] == 1


def test_artifacts_and_evaluate(tmp_path):
    cfg = small_cfg()
    res = train(cfg, tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == ("step", "task", "split", "ne", "train_flop", "infer_flop",
                                            "balance_ratio")
        rows = list(reader)
    assert {r["split"] for r in rows} == {"train", "eval"}
    assert load_train_config(tmp_path / "config.resolved.toml") == cfg
    records = generate_synthetic(cfg.data.synthetic_spec, cfg.seed)
    eval_set = chronological_split(records, cfg.eval.split)[1]
    first = evaluate(tmp_path / "checkpoint.bin", eval_set)
    second = evaluate(tmp_path / "checkpoint.bin", eval_set)
    assert np.array_equal(first["probs"], second["probs"]) and first["ne"] == second["ne"]
    assert first["ne"] == pytest.approx(res.eval_ne, rel=1e-12)
    with pytest.raises(ConfigError):
        evaluate(tmp_path / "checkpoint.bin", eval_set, tasks=[5])


def test_evaluate_after_zero_init_matches_half_predictor(tmp_path):
    cfg = TrainConfig.from_dict(dict(small_raw(data={"steps": 0}), run={"seed": 0, "init_std": 0.0}))
    records = generate_synthetic(cfg.data.synthetic_spec, 0)
    train(cfg, tmp_path, records=records, vocab={"item": 64, "action": 4})
    out = evaluate(tmp_path / "checkpoint.bin", records)
    labels = np.asarray([row for r in records for row in r.labels], float)
    for t in range(2):
        p = labels[:, t].mean()
        oracle = math.log(2) / -(p * math.log(p) + (1 - p) * math.log(1 - p))
        assert abs(out["ne"][t] - oracle) <= 1e-6


def test_empty_history_users(tmp_path):
    cfg = small_cfg()
    train(cfg, tmp_path)
    recs = [Record(i, [], [], [], [i % 64], [[i % 2, (i // 2) % 2]], request_time=i) for i in range(10)]
    out = evaluate(tmp_path / "checkpoint.bin", recs)
    assert all(np.isfinite(v) for v in out["ne"].values())


def test_one_layer_model_learns_noise_free_task():
    raw = small_raw(
        data={"batch_size": 32, "steps": 2000, "synthetic": {"n_users": 100_000}},
        eval={"interval": 2000},
        numerics={"norm": False},
    )
    raw["run"] = {"seed": 0, "init_std": 0.2}
    raw["model"] = {"d": 16, "num_heads": 2, "task_count": 2,
                    "stages": [{"n_layers": 1, "mask": {"kind": "semi_local", "k1": 8, "k2": 0}}]}
    res = train(TrainConfig.from_dict(raw))
    assert max(res.eval_ne.values()) < 0.7


# ---------------------------------------------------------------------------
# CLI


def test_cli_smoke(tmp_path, capsys):
    cfg_path = write_toml(small_raw(), tmp_path / "run.toml")
    assert main(["gen-data", "--config", str(cfg_path), "--seed", "1", "--out", str(tmp_path / "gen")]) == 0
    assert (tmp_path / "gen" / "data.jsonl").exists() and (tmp_path / "gen" / "history_lengths.png").exists()
    assert main(["train", "--config", str(cfg_path), "--seed", "1", "--out", str(tmp_path / "tr")]) == 0
    assert (tmp_path / "tr" / "training_curves.png").exists()
    ck = str(tmp_path / "tr" / "checkpoint.bin")
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "ev")]) == 0
    assert main(["eval", "--checkpoint", ck, "--data", str(tmp_path / "gen" / "data.jsonl"),
                 "--out", str(tmp_path / "ev2")]) == 0
    assert "ne" in json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert main(["quantize", "--checkpoint", ck, "--group-size", "4", "--out", str(tmp_path / "q")]) == 0
    assert (tmp_path / "q" / "embeddings.int4").exists()
    assert main(["bench-flops", "--out", str(tmp_path / "fl")]) == 0
    assert (tmp_path / "fl" / "flops.csv").exists() and (tmp_path / "fl" / "flops.png").exists()
    assert main(["fit-scaling", "--out", str(tmp_path / "fit")]) == 0
    fits = json.loads((tmp_path / "fit" / "fits.json").read_text())
    assert fits["train"]["linear_efficiency_ratio"]["ULTRA-HSTU"] == pytest.approx(5.35, abs=0.01)
    assert main(["simulate-lbsl", "--world-size", "2", "--batch-size", "4", "--steps", "30", "--warmup-steps", "5",
                 "--seed", "2", "--out", str(tmp_path / "lb")]) == 0
    summary = json.loads((tmp_path / "lb" / "summary.json").read_text())
    assert summary["lbsl_mean_balance_ratio"] >= 1.0
    assert (tmp_path / "lb" / "lbsl.png").exists()
    assert main(["train", "--out", str(tmp_path / "x")]) == 2
    capsys.readouterr()
