import json
from pathlib import Path

import numpy as np
import pytest

from motionwarp import cli
from motionwarp import io as mio


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else json.loads(err))


@pytest.fixture
def identity_pairs(tmp_path, capsys):
    out = tmp_path / "pairs"
    code, _ = run(["synthgen", "--kind", "warp", "--count", 3, "--noise", 0, "--warp-knots", 0,
                   "--shared-mixing", "true", "--min-frames", 12, "--max-frames", 12, "--out", out], capsys)
    assert code == 0
    return out


def test_identity_chain_reports_zero_error(tmp_path, identity_pairs, capsys):
    assert run(["align", "--mode", "dtw", "--input", identity_pairs, "--out", tmp_path / "a"], capsys)[0] == 0
    code, report = run(["eval-alignment", "--input", identity_pairs, "--alignments", tmp_path / "a",
                        "--out", tmp_path / "e"], capsys)
    assert code == 0 and report["metrics"]["mean_error"] == 0.0
    rows = (tmp_path / "e" / "errors.csv").read_text().splitlines()
    assert rows[0] == "pair,error,normalized_error" and len(rows) == 4


def test_perfect_predictions_give_unit_concordance(tmp_path, capsys):
    run(["synthgen", "--kind", "audio", "--n-words", 2, "--n-speakers", 2, "--min-frames", 6, "--max-frames", 7,
         "--out", tmp_path / "au"], capsys)
    run(["featurize", "--input", tmp_path / "au", "--out", tmp_path / "fe"], capsys)
    doc = json.loads((tmp_path / "fe" / "index.json").read_text())
    items = []
    for it in doc["items"]:
        params = mio.read_container(tmp_path / "fe" / it["file"])[0]["params"]
        mio.write_container(tmp_path / "pred" / "params" / it["id"], {"params": params})
        items.append({"id": it["id"], "file": f"params/{it['id']}.json", "frames": len(params)})
    cli.write_index(tmp_path / "pred", "predictions", items)
    code, report = run(["eval-ccc", "--input", tmp_path / "fe", "--predictions", tmp_path / "pred",
                        "--out", tmp_path / "ev"], capsys)
    assert code == 0 and report["metrics"]["mean_ccc"] == pytest.approx(1.0, abs=1e-12)


def test_manifest_contents(tmp_path, identity_pairs):
    m = json.loads((identity_pairs / "manifest.json").read_text())
    assert m["stage"] == "synthgen" and m["seed"] == 0
    assert m["config_hash"] == cli.config_hash(m["config"])
    assert m["config"]["noise"] == 0.0 and "index.json" in m["outputs"]
    assert all(mio.sha256_file(identity_pairs / f) == h for f, h in m["outputs"].items())


def test_rerun_reproduces_outputs(tmp_path, identity_pairs, capsys):
    code, report = run(["rerun", identity_pairs, "--out", tmp_path / "again"], capsys)
    assert code == 0 and report["identical"]


def test_seed_flag_changes_data(tmp_path, capsys):
    for seed in (1, 2):
        run(["synthgen", "--count", 1, "--seed", seed, "--out", tmp_path / f"s{seed}"], capsys)
    a = mio.read_container(tmp_path / "s1" / "pairs" / "pair0000")[0]["X1"]
    b = mio.read_container(tmp_path / "s2" / "pairs" / "pair0000")[0]["X1"]
    assert not np.array_equal(a, b)


def test_inputs_not_mutated(tmp_path, identity_pairs, capsys):
    before = {p: p.read_bytes() for p in identity_pairs.rglob("*") if p.is_file()}
    run(["align", "--input", identity_pairs, "--out", tmp_path / "a"], capsys)
    assert before == {p: p.read_bytes() for p in identity_pairs.rglob("*") if p.is_file()}


def test_config_file_layering(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "synthgen": {"count": 2, "noise": 0.5}, "align": {"mode": "dtw"}}))
    run(["synthgen", "--config", cfg, "--noise", 0.25, "--out", tmp_path / "o"], capsys)
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert (m["seed"], m["config"]["count"], m["config"]["noise"]) == (5, 2, 0.25)


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"synthgen": {"bogus": 1}}, {"align": {"nope": 2}},
                                 {"synthgen": {"kind": "video"}}])
def test_unknown_config_keys_rejected(tmp_path, capsys, doc):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    code, err = run(["synthgen", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 3 and err["error"] == "contract-violation"


def test_missing_input_exit_code(tmp_path, capsys):
    code, err = run(["featurize", "--input", tmp_path / "none", "--out", tmp_path / "o"], capsys)
    assert code == 2 and err["error"] == "missing-input"


def test_wrong_input_kind_is_contract_violation(tmp_path, identity_pairs, capsys):
    code, _ = run(["featurize", "--input", identity_pairs, "--out", tmp_path / "o"], capsys)
    assert code == 3


def test_training_failure_exit_code(tmp_path, identity_pairs, capsys, monkeypatch):
    from motionwarp import dcaw
    from motionwarp.errors import TrainingFailure

    def boom(*a, **k):
        raise TrainingFailure("non-finite DCAW objective", 1)

    monkeypatch.setattr(dcaw, "train_dcaw", boom)
    code, err = run(["train-dcaw", "--input", identity_pairs, "--out", tmp_path / "o"], capsys)
    assert code == 4 and err["error"] == "training-failure"


@pytest.mark.parametrize("value", ["0", "x"])
def test_bad_thread_cap(tmp_path, capsys, monkeypatch, value):
    monkeypatch.setenv("MOTIONWARP_THREADS", value)
    code, _ = run(["synthgen", "--count", 1, "--out", tmp_path / "o"], capsys)
    assert code == 3


def test_thread_cap_does_not_change_outputs(tmp_path, capsys, monkeypatch):
    run(["synthgen", "--kind", "audio", "--n-words", 1, "--n-speakers", 3, "--min-frames", 6, "--max-frames", 7,
         "--out", tmp_path / "au"], capsys)
    run(["featurize", "--input", tmp_path / "au", "--out", tmp_path / "f1"], capsys)
    monkeypatch.setenv("MOTIONWARP_THREADS", "3")
    run(["featurize", "--input", tmp_path / "au", "--out", tmp_path / "f3"], capsys)
    m1 = json.loads((tmp_path / "f1" / "manifest.json").read_text())
    m3 = json.loads((tmp_path / "f3" / "manifest.json").read_text())
    assert m1["outputs"] == m3["outputs"]


def test_blendshape_stages(tmp_path, capsys):
    run(["synthgen", "--kind", "mesh", "--count", 2, "--noise", 0, "--n-vertices", 30, "--out", tmp_path / "m"], capsys)
    code, report = run(["blendshapes-build", "--input", tmp_path / "m", "--out", tmp_path / "b"], capsys)
    assert code == 0 and report["metrics"]["n_components"] == 3
    assert report["metrics"]["subspace_angle_to_truth"] < 1e-6
    code, report = run(["blendshapes-eval", "--input", tmp_path / "m", "--model", tmp_path / "b",
                        "--out", tmp_path / "e"], capsys)
    assert report["metrics"]["mean_pervertex_error"] < 1e-10


def test_word_and_speaker_assembly(tmp_path, capsys):
    run(["synthgen", "--kind", "audio", "--n-words", 4, "--n-speakers", 5, "--min-frames", 6, "--max-frames", 7,
         "--out", tmp_path / "au"], capsys)
    run(["featurize", "--input", tmp_path / "au", "--out", tmp_path / "fe"], capsys)
    run(["align", "--input", tmp_path / "fe", "--out", tmp_path / "al"], capsys)
    run(["propagate", "--input", tmp_path / "fe", "--alignments", tmp_path / "al", "--out", tmp_path / "pr"], capsys)
    code, report = run(["assemble", "--input", tmp_path / "pr", "--features", tmp_path / "fe", "--split",
                        "word+speaker", "--out", tmp_path / "co"], capsys)
    m = report["metrics"]
    assert code == 0 and m["val_speakers"] == [4] and m["val_words"] == [3]
    assert (m["train"], m["validation"], m["dropped"]) == (12, 1, 7)


def test_help_lists_every_stage(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out
    assert all(stage in text for stage in cli.STAGES)
