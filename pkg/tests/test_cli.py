import json

import pytest

from neolite.cli import dispatch


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"workload": {"queries": 10, "joins": [1, 3]}, "train_steps": 10,
                               "net": {"query_layers": [8], "conv_channels": [8], "post_layers": [4]}}))
    assert dispatch(["gen-catalog", "--catalog", str(d / "cat.json")]) == 0
    assert dispatch(["gen-workload", "--config", str(cfg), "--catalog", str(d / "cat.json"),
                     "--workload", str(d / "wl.json")]) == 0
    assert dispatch(["bootstrap", "--config", str(cfg), "--catalog", str(d / "cat.json"),
                     "--workload", str(d / "wl.json"), "--state", str(d / "run")]) == 0
    return d


def test_pipeline(run_dir, capsys):
    assert len(json.loads((run_dir / "wl.json").read_text())) == 10
    assert dispatch(["train", "--state", str(run_dir / "run"), "--episodes", "2", "--expansions", "5",
                     "--json", "--metrics", str(run_dir / "m.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["episode"] == 2 and len(out["episodes"]) == 2
    assert (run_dir / "m.csv").exists() and (run_dir / "run" / "learning_curve.csv").exists()
    assert dispatch(["evaluate", "--state", str(run_dir / "run"), "--split", "all", "--json"]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert set(ev) == {"episode", "train", "test"} and len(ev["test"]["queries"]) == 2
    qid = ev["test"]["queries"][0]["query_id"]
    assert dispatch(["optimize", "--state", str(run_dir / "run"), "--query", qid, "--json"]) == 0
    opt = json.loads(capsys.readouterr().out)
    assert opt["simulated_latency"] > 0 and opt["key"]


def test_show_config_merges_file_and_flags(run_dir, capsys):
    cfg = run_dir / "cfg.json"
    assert dispatch(["train", "--episodes", "1", "--config", str(cfg), "--steps", "3", "--show-config"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["train_steps"] == 3 and shown["workload"]["queries"] == 10


def test_embed_train(run_dir, tmp_path):
    from neolite.simdb import SchemaConfig, TableSpec, generate_catalog
    cat = tmp_path / "c.json"
    cat.write_text(generate_catalog(SchemaConfig([TableSpec("t", 200, {"x": 4, "y": 3})]), 0).dumps())
    assert dispatch(["embed-train", "--catalog", str(cat), "--embeddings", str(tmp_path / "e.json")]) == 0
    assert json.loads((tmp_path / "e.json").read_text())["tokens"]


def test_exit_codes(run_dir, tmp_path, capsys):
    assert dispatch([]) == 2
    assert dispatch(["bogus"]) == 2
    assert dispatch(["train", "--state", str(run_dir / "run")]) == 2          # --episodes missing
    assert dispatch(["gen-catalog"]) == 1                                       # --catalog missing
    assert dispatch(["gen-workload", "--catalog", str(tmp_path / "none.json"), "--workload", "x"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"variant": "nope"}))
    assert dispatch(["gen-catalog", "--config", str(bad), "--catalog", str(tmp_path / "c.json")]) == 1
    assert dispatch(["optimize", "--state", str(run_dir / "run"), "--query", "no-such-query"]) == 1
    assert dispatch(["evaluate", "--state", str(tmp_path / "missing")]) == 3
    capsys.readouterr()


def test_integrity_error_on_swapped_catalog(run_dir, tmp_path):
    import shutil
    run = tmp_path / "run"
    shutil.copytree(run_dir / "run", run)
    manifest = json.loads((run / "run.json").read_text())
    cat = tmp_path / "other.json"
    assert dispatch(["gen-catalog", "--catalog-seed", "5", "--catalog", str(cat)]) == 0
    manifest["catalog_path"] = str(cat)
    (run / "run.json").write_text(json.dumps(manifest))
    assert dispatch(["evaluate", "--state", str(run)]) == 3
