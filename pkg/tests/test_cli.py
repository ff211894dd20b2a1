import csv
import json

import pytest

from tedio import config as cfgmod
from tedio.cli import main

SMALL = {
    "model": dict(frames=4, height=4, width=4, channels=1, d_model=8, n_blocks=2, n_heads=2, head_dim=4,
                  cond_vocab=8, cond_tokens=2, mlp_ratio=2),
    "train": {"steps": 5, "batch_size": 4},
    "data": {"n_clips": 6},
    "schedule": {"T": 10},
    "tedio": {"ell": 3, "n_iters": 2, "eta": 0.5},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "small.json"
    cfg_path.write_text(json.dumps(SMALL))
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(root / "corpus"), "--jitter-rate", "0.5"]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(root / "run"), "--corpus", str(root / "corpus")]) == 0
    return root, cfg_path, root / "run" / "checkpoint.tdt"


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_gen_data_writes_corpus_and_snapshot(workspace):
    root, _, _ = workspace
    manifest = json.loads((root / "corpus" / "manifest.json").read_text())
    assert sum(not c["coherent"] for c in manifest["clips"]) == 3
    snap = cfgmod.load(root / "corpus" / "config.json")
    assert snap.data.jitter_rate == 0.5 and snap.model.frames == 4


def test_train_outputs(workspace):
    root, _, ckpt = workspace
    assert ckpt.exists()
    assert len(_rows(root / "run" / "loss.csv")) == 5


def test_sample_is_byte_identical(workspace):
    root, cfg_path, ckpt = workspace
    outs = []
    for name in ("s1", "s2"):
        args = ["sample", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--tedio", "off", "--seeds", "0",
                "--out", str(root / name)]
        assert main(args) == 0
        outs.append((root / name / "sample_seed0.tdt").read_bytes())
    assert outs[0] == outs[1]
    assert (root / "s1" / "frames" / "seed0_f03.pgm").exists()


def test_sample_replays_from_snapshot(workspace):
    root, cfg_path, ckpt = workspace
    args = ["sample", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--tedio", "on", "--seeds", "1,2",
            "--out", str(root / "t1")]
    assert main(args) == 0
    assert main(["sample", "--config", str(root / "t1" / "config.json"), "--out", str(root / "t2")]) == 0
    for s in (1, 2):
        assert (root / "t1" / f"sample_seed{s}.tdt").read_bytes() == (root / "t2" / f"sample_seed{s}.tdt").read_bytes()
    events = _rows(root / "t1" / "events.csv")
    assert len(events) == 2 * 3 * 2
    counters = json.loads((root / "t1" / "counters.json").read_text())
    assert counters["forward"]["tedio"] == 2 * 3 * 2 * 2


def test_jobs_match_sequential(workspace):
    root, cfg_path, ckpt = workspace
    base = ["sample", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--tedio", "on", "--seeds", "3,4,5"]
    assert main(base + ["--out", str(root / "j1")]) == 0
    assert main(base + ["--out", str(root / "j2"), "--jobs", "2"]) == 0
    for s in (3, 4, 5):
        assert (root / "j1" / f"sample_seed{s}.tdt").read_bytes() == (root / "j2" / f"sample_seed{s}.tdt").read_bytes()


def test_report(workspace):
    root, cfg_path, ckpt = workspace
    for name, flag in (("rb", "off"), ("rt", "on")):
        assert main(["sample", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--tedio", flag,
                     "--seeds", "0,1,2", "--out", str(root / name)]) == 0
    assert main(["report", str(root / "rb"), str(root / "rt"), "--out", str(root / "rep")]) == 0
    assert len(_rows(root / "rep" / "comparison.csv")) == 3
    assert "sign test" in (root / "rep" / "summary.txt").read_text()


def test_probe(workspace):
    root, cfg_path, ckpt = workspace
    args = ["probe", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--corpus", str(root / "corpus"),
            "--timesteps", "10,8", "--blocks", "1,2", "--out", str(root / "probe")]
    assert main(args) == 0
    assert (root / "probe" / "clip_00000" / "attn_t10_block2.tdt").exists()
    assert (root / "probe" / "clip_00005" / "scores_t8_block1.tdt").exists()
    rows = _rows(root / "probe" / "variability.csv")
    assert sum(not r["clip_id"].startswith("#") for r in rows) == 6 * 2 * 2


def test_ablate_iters_zero_matches_baseline(workspace):
    root, cfg_path, ckpt = workspace
    args = ["ablate", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--sweep", "iters", "--values", "0,1,2,3",
            "--seeds", "0,1", "--out", str(root / "abl")]
    assert main(args) == 0
    rows = _rows(root / "abl" / "ablate_iters.csv")
    assert [r["sweep"] for r in rows] == ["baseline", "iters", "iters", "iters", "iters"]
    assert rows[1]["flicker_mean"] == rows[0]["flicker_mean"]
    assert rows[1]["dynamic_mean"] == rows[0]["dynamic_mean"]


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "gradcheck.txt").read_text().splitlines()
    assert len(lines) == 7 and all(line.startswith("PASS") for line in lines)


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error code=")
    return err[0]


def test_exit_codes(workspace, tmp_path, capsys):
    root, cfg_path, ckpt = workspace
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"tedio": {"bogus": 1}}))
    assert main(["sample", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "kind=ConfigError" in _error_line(capsys)

    assert main(["sample", "--checkpoint", str(tmp_path / "nope.tdt"), "--out", str(tmp_path / "o")]) == 3
    _error_line(capsys)

    assert main(["probe", "--checkpoint", str(ckpt), "--corpus", str(tmp_path / "missing"), "--out",
                 str(tmp_path / "o")]) == 3
    _error_line(capsys)

    assert main(["sample", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--k", "0", "--tedio", "on",
                 "--out", str(tmp_path / "o")]) == 2
    _error_line(capsys)

    assert main(["bogus-command"]) == 2


def test_dimension_error_exit_code(workspace, tmp_path, capsys):
    root, cfg_path, ckpt = workspace
    other = dict(SMALL, model=dict(SMALL["model"], height=5))
    p = tmp_path / "other.json"
    p.write_text(json.dumps(other))
    assert main(["gen-data", "--config", str(p), "--n", "2", "--out", str(tmp_path / "c5")]) == 0
    capsys.readouterr()
    code = main(["probe", "--checkpoint", str(ckpt), "--corpus", str(tmp_path / "c5"), "--out", str(tmp_path / "o")])
    assert code == 4
    assert "DimensionError" in _error_line(capsys)
