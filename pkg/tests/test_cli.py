import hashlib
import json

import pytest

from reident_ens.cli import main
from reident_ens.config import load_config, parse_config
from reident_ens.errors import ConfigError

FAST_CONFIG = """
seed = 3
max_k = 5

[dataset.synthetic]
n_subjects = 12
views_per_subject = 3
width = 32
height = 32

[[submodels]]
name = "bright"
method = "brightness"
resize = [32, 32]
hidden = [12]
output_dim = 6
[submodels.train]
epochs = 3

[[submodels]]
method = "avg_color"
resize = [32, 32]
hidden = [12]
output_dim = 6
[submodels.train]
epochs = 3

[ensemble]
kinds = ["concatenation", "weighted_accuracy", "majority_vote"]
budget = 12

[analysis]
pairwise = true
leave_one_out = true
correlation = true
correlation_trials = 500
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(FAST_CONFIG)
    return path


def test_resolved_config_fills_defaults(config):
    cfg = load_config(config)
    res = cfg.resolved()
    assert res["folds"] == {"k_folds": 5, "holdout_fold": 4, "seed": 3, "query_seed": 4}
    assert res["submodels"][1]["name"] == "avg_color"
    assert res["submodels"][0]["train"]["learning_rate"] == 0.001
    assert res["ensemble"]["train"]["epochs"] == 200
    assert res["dataset"]["synthetic"]["noise_sigma"] == 8.0
    assert load_config(config, seed_override=9).seed == 9


def test_content_hash_is_git_blob_hash(tmp_path):
    manifest = tmp_path / "m.csv"
    manifest.write_bytes(b"path,subject_id,view_id,tag\n")
    cfg = parse_config({"dataset": {"manifest": "m.csv"},
                        "submodels": [{"method": "brightness"}]}, tmp_path)
    payload = manifest.read_bytes()
    want = hashlib.sha1(b"blob " + str(len(payload)).encode() + b"\0" + payload).hexdigest()
    assert cfg.content_hash() == want


@pytest.mark.parametrize("raw,match", [
    ({"dataset": {"synthetic": {}}}, "at least one sub-model required"),
    ({"dataset": {"synthetic": {}}, "submodels": [{"method": "brightness", "epochs": 3}]},
     "unknown key"),
    ({"dataset": {"synthetic": {}}, "submodels": [{"method": "bogus"}]}, "unknown method"),
    ({"dataset": {"manifest": "missing.csv"}, "submodels": [{"method": "brightness"}]},
     "not found"),
    ({"submodels": [{"method": "brightness"}]}, "exactly one"),
    ({"dataset": {"synthetic": {}}, "submodels": [{"method": "brightness"}],
      "ensemble": {"kinds": ["stacking"]}}, "unknown kinds"),
    ({"dataset": {"synthetic": {}}, "submodels": [{"method": "brightness"}],
      "folds": {"k_folds": 2}}, "k_folds"),
])
def test_config_errors(tmp_path, raw, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(raw, tmp_path)


def test_run_writes_artifacts_and_is_deterministic(config, tmp_path, capsys):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(config), "--out", str(out1), "--stable-output"]) == 0
    assert main(["run", "--config", str(config), "--out", str(out2), "--stable-output",
                 "--threads", "2"]) == 0
    assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
    assert capsys.readouterr().out == ""
    report = json.loads((out1 / "report.json").read_text())
    assert "timings" not in report
    assert len(report["methods"]["bright"]["per_fold"]) == 4
    assert report["seeds"]["master"] == 3
    assert len(report["dataset"]["content_hash"]) == 40
    assert report["config"]["submodels"][0]["train"]["epochs"] == 3
    for name in ("cmc.csv", "cmc_per_fold.csv", "relative_uncertainty.csv", "weights.csv",
                 "pairwise_improvement.csv", "leave_one_out.csv", "correlation.csv"):
        assert (out1 / "figures" / name).is_file()
    assert (out1 / "models" / "rotation0_bright.bin").is_file()
    assert (out1 / "models" / "rotation0_weighted_accuracy.bin").is_file()
    manifest = json.loads((out1 / "run_manifest.json").read_text())
    assert "report.json" in manifest["files"]
    text = (out1 / "report.txt").read_text()
    assert sum(line.startswith("bright ") for line in text.splitlines()) == 5


def test_run_with_timings_and_seed_override(config, tmp_path):
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "o"), "--seed", "5"]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert "timings" in report and report["seeds"]["master"] == 5
    assert (tmp_path / "o" / "figures" / "timing.csv").is_file()


def test_run_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[dataset.synthetic]\nn_subjects = 5\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "at least one sub-model required" in capsys.readouterr().err
    bad.write_text("seeds = 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["run", "--out", str(tmp_path)]) == 2
    assert main(["run", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_runtime_failure_exit_1(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[dataset.synthetic]\nn_subjects = 10\nviews_per_subject = 2\n'
                   'width = 32\nheight = 32\n[[submodels]]\nname = "b"\n'
                   'method = "brightness"\nresize = [32, 32]\ninput_norm = "none"\n[submodels.train]\n'
                   'epochs = 2\nlearning_rate = 1e300\noptimizer = "sgd"\n')
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "rotation 0 (eval fold 0)" in err and "training sub-model 'b'" in err


def _report(tmp_path, name, changes=None):
    doc = {"methods": {"a": {"mean": [0.5, 0.7]}, "b": {"mean": [0.6, 0.9]}}}
    for (method, k), value in (changes or {}).items():
        doc["methods"][method]["mean"][k] = value
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_compare(tmp_path, capsys):
    base = _report(tmp_path, "a.json")
    assert main(["compare", base, base]) == 0
    near = _report(tmp_path, "n.json", {("a", 0): 0.501})
    assert main(["compare", base, near, "--tolerance", "0.01"]) == 0
    assert capsys.readouterr().out == ""
    far = _report(tmp_path, "f.json", {("b", 1): 0.5})
    assert main(["compare", base, far, "--tolerance", "0.01"]) == 1
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 and out[0].startswith("b\trank-2")
    missing = tmp_path / "m.json"
    missing.write_text(json.dumps({"methods": {"a": {"mean": [0.5, 0.7]}}}))
    assert main(["compare", base, str(missing)]) == 2
    missing.write_text("{}")
    assert main(["compare", base, str(missing)]) == 2


def test_synth_and_manifest_run(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--subjects", "10", "--views", "3",
                 "--width", "32", "--height", "32", "--seed", "2"]) == 0
    assert (data / "manifest.csv").is_file()
    lines = (data / "manifest.csv").read_text().strip().splitlines()
    assert len(lines) == 31
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'[dataset]\nmanifest = "{data / "manifest.csv"}"\n[folds]\nk_folds = 3\n'
                   '[[submodels]]\nmethod = "color_variance"\nresize = [32, 32]\nhidden = [8]\noutput_dim = 4\n'
                   '[submodels.train]\nepochs = 2\n')
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"),
                 "--stable-output"]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["dataset"]["source"] == "manifest"
    assert len(report["methods"]["color_variance"]["per_fold"]) == 2


def test_correlate_and_ablate(config, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config), "--out", str(out), "--stable-output"]) == 0
    e1, e2 = (str(out / "embeddings" / f"rotation0_{n}.csv") for n in ("bright", "avg_color"))
    assert main(["correlate", e1, e1, e2, "--names", "x,y,z", "--trials", "2000",
                 "--out", str(tmp_path / "corr")]) == 0
    corr = json.loads((tmp_path / "corr" / "correlation.json").read_text())
    assert corr["names"] == ["x", "y", "z"] and corr["matrix"][0][1] == 1.0
    assert main(["correlate", e1, "--out", str(tmp_path / "c2")]) == 2
    assert main(["ablate", "--config", str(config), "--out", str(tmp_path / "ab"),
                 "--sizes", "2,4", "--stable-output"]) == 0
    ab = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert [r["size"] for r in ab["size_sweep"]["results"]] == [2, 4]
    assert set(ab["leave_one_out"]["delta"]) == {"bright", "avg_color"}
    assert (tmp_path / "ab" / "figures" / "size_sweep.csv").is_file()
    assert main(["ablate", "--config", str(config), "--out", str(tmp_path / "ab"),
                 "--sizes", "0"]) == 2
