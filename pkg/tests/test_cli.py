import hashlib
import json
import math

import numpy as np
import pytest

from dwrs.attacks import read_rules
from dwrs.cli import ExperimentConfig, main, read_data, read_sweep, run_sweep, write_sweep
from dwrs.dwrs_d import load_records
from dwrs.evalkit import read_reports

# small enough to train in seconds; seed 0 memorizes the watermark (measured)
SMALL = {
    "dataset": {"n_users": 400, "n_items": 80, "len_range": [10, 20], "seed": 1},
    "watermark": {"p": 0.03, "rf": [2, 2]},
    "model": {"d_model": 16, "max_len": 20, "ffn_width": 32, "dropout": 0.0},
    "train": {"epochs": 30},
    "eval": {"ks": [5, 10, 20]},
    "attack": {"finetune_epochs": 2, "checkpoints": [1], "n_sequences": 40, "gen_len": 8,
               "surrogate_epochs": 2, "min_support": 3},
    "seeds": [0],
}


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(tmp, *args, config="cfg.json"):
    return main(["--config", str(tmp / config), "--out", str(tmp / "out"), *args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    (tmp / "cfg.json").write_text(json.dumps(SMALL))
    o = tmp / "out"
    codes = {}
    codes["generate"] = run(tmp, "generate", "--holdout", "0.2")
    codes["watermark"] = run(tmp, "watermark", "--data", str(o / "dataset.txt"))
    codes["train"] = run(tmp, "train", "--data", str(o / "watermarked.txt"))
    codes["oracle"] = run(tmp, "train", "--data", str(o / "dataset.txt"), "--name", "oracle")
    codes["evaluate"] = run(tmp, "evaluate", "--model", str(o / "model.npz"), "--data", str(o / "dataset.txt"),
                            "--records", str(o / "watermark.json"), "--oracle", str(o / "oracle.npz"))
    return tmp, codes


def test_config_round_trip_and_validation(tmp_path):
    cfg = ExperimentConfig.from_dict(SMALL)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.model.d_model == 16 and cfg.train.epochs == 30 and cfg.seeds == (0,)
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"watermark": {"variant": "dwrs-x"}})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"model": {"width": 3}})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"seeds": []})
    (tmp_path / "bad.json").write_text(json.dumps({"modle": {}}))
    assert main(["--config", str(tmp_path / "bad.json"), "--out", str(tmp_path), "generate"]) == 1


def test_pipeline_claims_on_watermarked_model(pipeline):
    tmp, codes = pipeline
    assert codes == {"generate": 0, "watermark": 0, "train": 0, "oracle": 0, "evaluate": 0}
    verdict = json.loads((tmp / "out" / "verdict.json").read_text())
    assert verdict["verdict"] == "claim" and verdict["reference"] == "oracle"
    ctx = [r.context for _, r in read_reports(tmp / "out" / "report.csv")]
    assert ctx == ["utility", "validity", "oracle-validity"]


def test_watermark_insertion_count(pipeline):
    tmp, _ = pipeline
    rec, = load_records(tmp / "out" / "watermark.json")
    assert rec.target_count == math.ceil(0.03 * 400) and rec.achieved_count == rec.target_count
    assert len(read_data(tmp / "out" / "watermarked.txt")) == 400


def test_oracle_as_suspect_is_no_claim(pipeline):
    tmp, _ = pipeline
    o = tmp / "out"
    code = main(["--config", str(tmp / "cfg.json"), "--out", str(tmp / "o2"), "evaluate", "--model",
                 str(o / "oracle.npz"), "--data", str(o / "dataset.txt"), "--records", str(o / "watermark.json")])
    assert code == 2
    assert json.loads((tmp / "o2" / "verdict.json").read_text())["reference"] == "random"


def test_holdout_split_is_disjoint(pipeline):
    tmp, _ = pipeline
    main_d, hold = read_data(tmp / "out" / "main.txt"), read_data(tmp / "out" / "holdout.txt")
    assert len(hold) == 80 and len(main_d) == 320
    assert main_d.n_items == hold.n_items == 80
    assert {u.user for u in main_d.users}.isdisjoint(u.user for u in hold.users)


def test_replay_is_byte_identical_and_inputs_untouched(pipeline):
    tmp, _ = pipeline
    o = tmp / "out"
    inputs = [o / "dataset.txt", o / "dataset.txt.meta.json", tmp / "cfg.json"]
    before = [digest(p) for p in inputs]
    r = tmp / "replay"
    for args in (["generate", "--holdout", "0.2"], ["watermark", "--data", str(o / "dataset.txt")],
                 ["train", "--data", str(r / "watermarked.txt")]):
        assert main(["--config", str(tmp / "cfg.json"), "--out", str(r), *args]) == 0
    for name in ("dataset.txt", "main.txt", "holdout.txt", "watermarked.txt", "watermark.json", "model.npz",
                 "model_history.csv"):
        assert digest(r / name) == digest(o / name), name
    assert [digest(p) for p in inputs] == before


def test_variants(pipeline, tmp_path):
    tmp, _ = pipeline
    data = tmp / "out" / "dataset.txt"
    cfg = str(tmp / "cfg.json")
    assert main(["--config", cfg, "--out", str(tmp_path / "base"), "watermark", "--data", str(data),
                 "--variant", "dwrs-d-base"]) == 0
    base, = load_records(tmp_path / "base" / "watermark.json")
    plain, = load_records(tmp / "out" / "watermark.json")
    assert base.watermark == plain.watermark and base.variant == "baseline"

    assert main(["--config", cfg, "--out", str(tmp_path / "u"), "watermark", "--data", str(data),
                 "--variant", "dwrs-u"]) == 0
    plan, = load_records(tmp_path / "u" / "watermark.json")
    clean = read_data(data).by_user()
    changed = [u.user for u in read_data(tmp_path / "u" / "watermarked.txt").users if u.items != clean[u.user].items]
    assert changed == [plan.user]


def test_heatmap_rows(pipeline):
    tmp, _ = pipeline
    o = tmp / "out"
    assert run(tmp, "heatmap", "--model", str(o / "model.npz"), "--data", str(o / "dataset.txt")) == 0
    A = np.loadtxt(o / "attention.csv", delimiter=",")
    assert A.shape == (20, 20)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-6)
    rf = json.loads((o / "receptive_field.json").read_text())
    assert 0 <= rf["before"] < 20 and rf["after"] == 0


def test_attacks_write_parseable_csv(pipeline):
    tmp, _ = pipeline
    o = tmp / "out"
    common = ["--model", str(o / "model.npz"), "--data", str(o / "main.txt"), "--records", str(o / "watermark.json")]
    assert run(tmp, "attack", "finetune", *common, "--clean", str(o / "holdout.txt")) == 0
    phases = [ph for ph, _ in read_reports(o / "attack_finetune.csv")]
    assert phases == ["before", "before", "epoch-1", "epoch-1", "after", "after"]
    assert run(tmp, "attack", "distill", *common) == 0
    assert [ph for ph, _ in read_reports(o / "attack_distill.csv")] == ["before", "before", "after", "after"]
    assert run(tmp, "attack", "mine", "--data", str(o / "watermarked.txt"), "--records", str(o / "watermark.json")) == 0
    rules = read_rules(o / "rules.csv")
    assert rules and all(r.support >= 3 and 0 < r.confidence <= 1 for r in rules)
    rec, = load_records(o / "watermark.json")
    w1, w2, w3 = rec.watermark.items
    hit = [r for r in rules if r.antecedent == {w1, w2} and r.consequent == {w3}]
    # natural co-occurrences of the body items can dilute confidence, never support
    assert hit and hit[0].support >= rec.achieved_count


def test_attack_missing_arguments_is_error(pipeline):
    tmp, _ = pipeline
    assert run(tmp, "attack", "finetune", "--data", str(tmp / "out" / "main.txt")) == 1
    assert run(tmp, "train", "--data", str(tmp / "out" / "nope.txt")) == 1


def test_harden_command(pipeline, tmp_path):
    tmp, _ = pipeline
    cfg = dict(SMALL, watermark={"p": 0.01}, attack={"n_responses": 2, "n_shuffled": 2, "harden_rf": [1, 1]})
    (tmp_path / "h.json").write_text(json.dumps(cfg))
    assert main(["--config", str(tmp_path / "h.json"), "--out", str(tmp_path), "attack", "harden", "--data",
                 str(tmp / "out" / "dataset.txt")]) == 0
    recs = load_records(tmp_path / "watermark.json")
    assert [r.meta["role"] for r in recs] == ["response", "response", "shuffled-body"]
    assert recs[0].achieved_count == recs[1].achieved_count == 4


def test_sweep_rows_and_parallel_agreement(pipeline, tmp_path):
    tmp, _ = pipeline
    cfg = ExperimentConfig.from_dict(dict(SMALL, train={"epochs": 2}, seeds=[0, 1]))
    data = str(tmp / "out" / "dataset.txt")
    rows = run_sweep(cfg, data, "l", [2, 3])
    assert [(r["value"], r["seed"]) for r in rows] == [(2, 0), (2, 1), (3, 0), (3, 1), (2, "mean"), (3, "mean")]
    assert rows[4]["validity_recall"] == pytest.approx((rows[0]["validity_recall"] + rows[1]["validity_recall"]) / 2)
    par = run_sweep(cfg, data, "l", [2, 3], workers=2)
    assert par == rows
    write_sweep(rows, tmp_path / "s.csv")
    back = read_sweep(tmp_path / "s.csv")
    assert [r["validity_recall"] for r in back] == pytest.approx([r["validity_recall"] for r in rows], abs=1e-6)
    with pytest.raises(ValueError):
        run_sweep(cfg, data, "depth", [1])
