import csv
import json

import pytest

from stgn.cli import main
from stgn.config import ConfigError, load_run_config
from stgn.graph_store import write_trace
from stgn.synthetic import planted_trace

CONFIG = """\
[train]
d_v = 4
d_e = 2
d_m = 8
d_T = 4
d_h = 8
d_emb = 8
n_neighbors = 4
batch_size = 50
eval_batch_size = 50
epochs = 1
learning_rate = 0.001
spe_hidden = 16
spe_fourier_in = 8

[sim]
delta_P = 600
delta_p = 300
candidate_window = 36000
n_periods = 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.ini").write_text(CONFIG)
    write_trace(planted_trace(n_users=30, n_items=12, n_genres=3, n_events=600, seed=3),
                root / "trace.csv")
    base = ["--config", str(root / "run.ini"), "--out", str(root / "out")]
    assert main(["ingest", "--trace", str(root / "trace.csv"), *base]) == 0
    for v in ("TGN-L", "M2-STGN-L+U+SPE"):
        assert main(["train", "--variant", v, "--no-validate", *base]) == 0
    return root, base


def test_ingest_writes_report_and_is_deterministic(workspace, tmp_path):
    root, base = workspace
    rep = json.loads((root / "out" / "ingest_report.json").read_text())
    assert rep["kept_events"] > 0 and "dropped_users" in rep
    again = ["--config", str(root / "run.ini"), "--out", str(tmp_path)]
    assert main(["ingest", "--trace", str(root / "trace.csv"), *again]) == 0
    assert json.loads((tmp_path / "ingest_report.json").read_text()) == rep
    assert (tmp_path / "resolved_ingest.ini").is_file()


def test_missing_trace_fails_with_path(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["ingest", "--trace", str(missing), "--out", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_all_filtered_trace_fails(tmp_path, capsys):
    bad = tmp_path / "short.csv"
    bad.write_text("timestamp,user,item,duration,genres\n1,u,i,100,drama\n")
    assert main(["ingest", "--trace", str(bad), "--out", str(tmp_path)]) == 1
    assert "no events survive" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[train]\nwidth = 3\n")
    assert main(["ingest", "--planted", "--config", str(ini), "--out", str(tmp_path)]) == 1
    assert "width" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        load_run_config(None, {"bogus.key": 1})


def test_flag_overrides_file(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[run]\nseed = 3\n[train]\nepochs = 7\nd_T = 5\n")
    cfg = load_run_config(ini, {"seed": 9})
    assert cfg.seed == 9 and cfg.train.epochs == 7 and cfg.train.d_T == 5
    assert load_run_config(ini, {"train.epochs": 2}).train.epochs == 2


def test_train_artifacts(workspace):
    out = workspace[0] / "out"
    for name in ("TGN-L.pt", "TGN-L_loss.csv", "TGN-L_loss.png", "metrics.jsonl",
                 "resolved_train.ini"):
        assert (out / name).is_file(), name


@pytest.mark.parametrize("scorer,auc", [("oracle", 1.0), ("constant", 0.5)])
def test_eval_stub_scorers(workspace, scorer, auc):
    root, base = workspace
    assert main(["eval", "--scorer", scorer, *base]) == 0
    rep = json.loads((root / "out" / f"eval_{scorer}-stub.json").read_text())["reports"]
    assert rep["transductive"]["auc"] == auc and rep["inductive"]["auc"] == auc
    if scorer == "oracle":
        assert rep["transductive"]["ap"] == 1.0


def test_eval_model_is_repeatable(workspace):
    root, base = workspace
    ckpt = str(root / "out" / "TGN-L.pt")
    outs = []
    for _ in range(2):
        assert main(["eval", "--checkpoint", ckpt, *base]) == 0
        d = json.loads((root / "out" / "eval_TGN-L.json").read_text())
        d.pop("metadata")
        outs.append(d)
    assert outs[0] == outs[1]


def test_eval_refuses_foreign_store(workspace, tmp_path, capsys):
    root, base = workspace
    other = ["--config", str(root / "run.ini"), "--out", str(tmp_path)]
    write_trace(planted_trace(n_users=30, n_items=12, n_genres=3, n_events=600, seed=4),
                tmp_path / "t.csv")
    assert main(["ingest", "--trace", str(tmp_path / "t.csv"), *other]) == 0
    assert main(["eval", "--checkpoint", str(root / "out" / "TGN-L.pt"), *other]) == 1
    assert "different event store" in capsys.readouterr().err


def test_cache_sim_hourly_rows(workspace):
    root, base = workspace
    ckpt = str(root / "out" / "M2-STGN-L+U+SPE.pt")
    assert main(["cache-sim", "--checkpoint", ckpt, *base]) == 0
    out = root / "out"
    for name in ("cache_sim", "lru_online", "lru_snapshot"):
        rows = list(csv.DictReader((out / f"{name}.csv").open()))
        assert len(rows) == 4
        js = json.loads((out / f"{name}.json").read_text())
        assert js["requests"] == sum(int(r["requests"]) for r in rows)
    assert (out / "cache_sim_hourly.png").stat().st_size > 0


def test_cache_sim_default_day(workspace, tmp_path):
    root, base = workspace
    out = tmp_path / "day"
    args = ["cache-sim", "--scorer", "recency", "--store", str(root / "out"), "--out", str(out)]
    assert main(args) == 0
    assert len((out / "cache_sim.csv").read_text().splitlines()) == 25


def test_sweep_grid(workspace):
    root, base = workspace
    assert main(["sweep", "--scorer", "recency", "--p-thre-grid", "0.9,0.99",
                 "--delta-p-grid", "60,300", "--window-h-grid", "5,10", *base]) == 0
    rows = list(csv.DictReader((root / "out" / "sweep.csv").open()))
    assert len(rows) == 8
    assert all(len(r["h_per_hour"].split(";")) == 4 for r in rows)


def test_report_two_checkpoints(workspace):
    root, base = workspace
    out = root / "out"
    assert main(["report", str(out / "TGN-L.pt"), str(out / "M2-STGN-L+U+SPE.pt"), *base]) == 0
    rows = list(csv.DictReader((out / "report.csv").open()))
    assert [r["model"] for r in rows] == ["TGN-L", "M2-STGN-L+U+SPE"]
    md = (out / "report.md").read_text().splitlines()
    assert len(md) == 4 and md[2].startswith("| Baseline | TGN-L |")
    sim = list(csv.reader((out / "genre_similarity.csv").open()))
    assert len(sim) == 4 and sim[1][1] == "1.000000"
    for png in ("genre_similarity.png", "variant_ap.png"):
        assert (out / png).stat().st_size > 0


def test_report_missing_checkpoint(workspace, capsys):
    root, base = workspace
    missing = str(root / "out" / "absent.pt")
    assert main(["report", missing, *base]) == 1
    assert missing in capsys.readouterr().err
