import csv
import filecmp
import json

import numpy as np
import pytest

from tmnet.cli import RunConfig, build_parser, main, parse_t_list
from tmnet.tensor import ConfigError

TINY = ["--set", "channels=8", "--set", "front_resblocks=1", "--set", "recon_resblocks=1",
        "--set", "val_clips=1", "--set", "val_interval=100"]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(d), "--clips", "10", "--seed", "42", "--val", "1", "--test", "1"]) == 0
    return d


@pytest.fixture(scope="module")
def checkpoints(corpus_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    s1, s2 = d / "s1.ckpt", d / "s2.ckpt"
    assert main(["train", "--step", "1", "--data", str(corpus_dir), "--ckpt-out", str(s1), "--iters", "2"] + TINY) == 0
    assert main(["train", "--step", "2", "--data", str(corpus_dir), "--ckpt-in", str(s1), "--ckpt-out", str(s2),
                 "--iters", "2"] + TINY) == 0
    return s1, s2


def test_synth_layout_and_determinism(corpus_dir, tmp_path):
    clips = sorted(p.name for p in corpus_dir.iterdir() if p.is_dir())
    assert clips == [f"clip{i:04d}" for i in range(10)]
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    assert len(manifest["clips"]) == 10
    again = tmp_path / "again"
    main(["synth", "--out", str(again), "--clips", "10", "--seed", "42", "--val", "1", "--test", "1"])
    cmp = filecmp.dircmp(corpus_dir, again)
    assert not cmp.diff_files and filecmp.cmp(corpus_dir / "clip0003/lr/clip3_f4_g.pgm",
                                              again / "clip0003/lr/clip3_f4_g.pgm", shallow=False)


def test_synth_zero_clips_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", str(tmp_path), "--clips", "0"])
    assert exc.value.code == 2


def test_step2_needs_checkpoint(corpus_dir, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--step", "2", "--data", str(corpus_dir), "--ckpt-out", str(tmp_path / "x")])
    assert exc.value.code == 2


def test_train_chain_and_run_log(checkpoints):
    s1, s2 = checkpoints
    log = json.loads((s2.parent / "s2.ckpt.run.json").read_text())
    assert log["overrides"]["channels"] == 8 and log["step"] == "two_step2"
    rows = list(csv.reader(open(f"{s1}.log.csv")))
    assert rows[0] == ["iter", "lr", "loss", "val_psnr_db", "val_ssim"]


def test_train_bad_config(corpus_dir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"chanels": 8}))
    code = main(["train", "--step", "1", "--config", str(cfg), "--data", str(corpus_dir), "--ckpt-out",
                 str(tmp_path / "x")])
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 1 and len(err) == 1 and "chanels" in err[0]


def test_train_one_step(corpus_dir, tmp_path):
    out = tmp_path / "one.ckpt"
    assert main(["train", "--step", "one", "--data", str(corpus_dir), "--ckpt-out", str(out), "--iters", "1"]
                + TINY) == 0
    assert out.exists()


@pytest.mark.parametrize("t,n_out", [("0.3,0.5,0.7", 5), (",".join(f"0.{k}" for k in range(1, 10)), 11)])
def test_interp_counts(checkpoints, corpus_dir, tmp_path, t, n_out):
    lr = corpus_dir / "clip0000" / "lr"
    out = tmp_path / "frames"
    assert main(["interp", "--ckpt", str(checkpoints[1]), "--frames", str(lr / "clip0_f0"), str(lr / "clip0_f6"),
                 "--t", t, "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert len(names) == 3 * n_out
    stems = sorted({n.rsplit("_", 1)[0] for n in names})
    ts = [float(s.split("_t")[1]) + int(s.split("_g")[1][:3]) for s in stems]
    assert ts == sorted(ts) and stems[0] == "frame_g000_t0.0000" and stems[-1] == "frame_g001_t0.0000"


def test_interp_rejects_bad_t(checkpoints, corpus_dir, tmp_path, capsys):
    lr = corpus_dir / "clip0000" / "lr"
    code = main(["interp", "--ckpt", str(checkpoints[1]), "--frames", str(lr / "clip0_f0"), str(lr / "clip0_f6"),
                 "--t", "1.5", "--out", str(tmp_path)])
    assert code == 1 and "error:" in capsys.readouterr().err


def test_eval_oracle_and_baseline(corpus_dir, tmp_path):
    report = tmp_path / "r.csv"
    assert main(["eval", "--oracle", "--data", str(corpus_dir), "--report", str(report)]) == 0
    rows = list(csv.DictReader(open(report)))
    body = [r for r in rows if r["clip_id"] != "mean"]
    assert all(float(r["psnr_db"]) == 100.0 for r in body)
    assert not any(r["clip_id"].startswith("baseline") for r in rows)
    assert main(["eval", "--oracle", "--data", str(corpus_dir), "--report", str(report), "--baseline"]) == 0
    rows = list(csv.DictReader(open(report)))
    base = [r for r in rows if r["clip_id"].startswith("baseline:") and r["clip_id"] != "baseline:mean"]
    footer = next(r for r in rows if r["clip_id"] == "baseline:mean")
    assert base and float(footer["psnr_db"]) == pytest.approx(np.mean([float(r["psnr_db"]) for r in base]), abs=1e-3)


def test_eval_checkpoint(checkpoints, corpus_dir, tmp_path):
    assert main(["eval", "--ckpt", str(checkpoints[1]), "--data", str(corpus_dir), "--report",
                 str(tmp_path / "r.csv"), "--protocol", "step2"]) == 0


def test_eval_corrupt_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("[")
    assert main(["eval", "--oracle", "--data", str(tmp_path), "--report", str(tmp_path / "r.csv")]) == 1


def test_gradcheck_subset_deterministic(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    ops = "conv2d,pixel_shuffle,tmb_map,charbonnier_loss"
    assert main(["gradcheck", "--seed", "3", "--only", ops, "--out", str(a)]) == 0
    assert main(["gradcheck", "--seed", "3", "--only", ops, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes() and len(a.read_text().splitlines()) == 4


def test_ablate_unknown_suite(tmp_path):
    with pytest.raises(SystemExit):
        main(["ablate", "--suite", "q9", "--out", str(tmp_path / "x.csv")])


@pytest.mark.parametrize("command,flags", [
    ("synth", ["--out", "--clips", "--seed", "--hr-size", "--frames"]),
    ("train", ["--step", "--config", "--data", "--ckpt-out", "--ckpt-in"]),
    ("interp", ["--ckpt", "--frames", "--t", "--out"]),
    ("eval", ["--ckpt", "--data", "--report", "--baseline"]),
    ("gradcheck", ["--seed"]),
    ("ablate", ["--suite", "--data", "--budget", "--out"]),
])
def test_help_lists_flags(command, flags, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    text = capsys.readouterr().out
    assert exc.value.code == 0 and all(f in text for f in flags)


def test_parse_t_list():
    assert parse_t_list("0.3,0.5") == [0.3, 0.5]
    assert parse_t_list("0.5;0.25,0.75") == [[0.5], [0.25, 0.75]]
    for bad in ("", "a", "0", "0.5;", "1.5"):
        with pytest.raises(ConfigError):
            parse_t_list(bad)


def test_run_config_rejects_unknown():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"channel": 4})
    run = RunConfig.from_dict({"channels": 4, "seed": 9, "data_dir": "d"})
    assert run.model.channels == 4 and run.train.seed == 9 and run.paths == {"data_dir": "d"}


def test_threads_env(monkeypatch, capsys):
    monkeypatch.setenv("TMNET_THREADS", "zero")
    assert main(["gradcheck", "--only", "pixel_shuffle"]) == 1
    monkeypatch.setenv("TMNET_THREADS", "1")
    assert main(["gradcheck", "--only", "pixel_shuffle"]) == 0


def test_parser_builds():
    assert build_parser().prog == "tmnet"
