import csv

import pytest

from avth import media
from avth.cli import EXIT_OK, EXIT_USER, main
from avth.container import demux
from avth.synthetic import synthetic_talking_head


@pytest.fixture(scope="module")
def files180(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    seq, clip = synthetic_talking_head(180, 32, 32, seed=0)
    media.write_y4m(d / "in.y4m", seq)
    media.write_wav(d / "in.wav", clip)
    return d


def test_encode_default_and_gop60(files180, capsys):
    d = files180
    assert main(["encode", str(d / "in.y4m"), str(d / "in.wav"), str(d / "a.avth")]) == EXIT_OK
    assert demux((d / "a.avth").read_bytes()).meta.gop_count == 6
    assert "kbps" in capsys.readouterr().out
    assert main(["encode", str(d / "in.y4m"), str(d / "in.wav"), str(d / "b.avth"), "--gop", "60"]) == EXIT_OK
    assert demux((d / "b.avth").read_bytes()).meta.gop_count == 3


def test_encode_requires_audio(files180, capsys):
    d = files180
    assert main(["encode", str(d / "in.y4m"), str(d / "nope.wav"), str(d / "c.avth")]) == EXIT_USER
    assert "audio required" in capsys.readouterr().err
    assert main(["encode", str(d / "in.y4m"), str(d / "c.avth")]) == EXIT_USER
    assert "audio required" in capsys.readouterr().err


def test_bad_config_and_usage(files180, tmp_path, capsys):
    d = files180
    assert main(["encode", str(d / "in.y4m"), str(d / "in.wav"), str(tmp_path / "x.avth"), "--gop", "1"]) == EXIT_USER
    assert "gop_size" in capsys.readouterr().err
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("aux_qp = high\n")
    assert main(["encode", str(d / "in.y4m"), str(d / "in.wav"), str(tmp_path / "x.avth"), "--config", str(cfg)]) == EXIT_USER
    assert "config key 'aux_qp'" in capsys.readouterr().err
    assert main(["frobnicate"]) == EXIT_USER
    assert main(["decode", str(tmp_path / "missing.avth"), str(tmp_path / "o.y4m")]) == EXIT_USER


def test_decode_dump_tr_and_seed_echo(tmp_path, capsys):
    seq, clip = synthetic_talking_head(20, 32, 32, seed=1)
    media.write_y4m(tmp_path / "in.y4m", seq)
    media.write_wav(tmp_path / "in.wav", clip)
    stream = tmp_path / "s.avth"
    assert main(["encode", str(tmp_path / "in.y4m"), str(tmp_path / "in.wav"), str(stream), "--gop", "10"]) == EXIT_OK
    out, tr = tmp_path / "out.y4m", tmp_path / "tr.y4m"
    assert main(["decode", str(stream), str(out), "--dump-tr", str(tr), "--seed", "5"]) == EXIT_OK
    dec, trs = media.read_y4m(out), media.read_y4m(tr)
    assert len(dec) == 20 and len(trs) == 18
    assert "XAVTH_SEED=5" in dec.y4m_params and "XAVTH_SEED=5" in trs.y4m_params
    assert main(["metrics", str(tmp_path / "in.y4m"), str(out), "--csv", str(tmp_path / "m.csv")]) == EXIT_OK
    assert "PSNR" in capsys.readouterr().out
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) == 20 and float(rows[0]["psnr"]) > 25  # keyframe


def test_bdrate_command(tmp_path, capsys):
    text = "setting,bitrate_kbps,metric\nq1,100,30\nq2,200,33\nq3,400,35.5\nq4,800,37.2\n"
    (tmp_path / "a.csv").write_text(text)
    assert main(["bdrate", str(tmp_path / "a.csv"), str(tmp_path / "a.csv")]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "BD-rate: 0.0%"
    (tmp_path / "bad.csv").write_text("setting,bitrate_kbps,metric\nq1,100,30\nq2,x,31\n")
    assert main(["bdrate", str(tmp_path / "a.csv"), str(tmp_path / "bad.csv")]) == EXIT_USER
    assert "line 3" in capsys.readouterr().err


def test_sweep_command(tmp_path):
    seq, clip = synthetic_talking_head(40, 32, 32, seed=2)
    media.write_y4m(tmp_path / "in.y4m", seq)
    media.write_wav(tmp_path / "in.wav", clip)
    out = tmp_path / "rd.csv"
    argv = ["sweep", str(tmp_path / "in.y4m"), str(tmp_path / "in.wav"), "--gops", "10,20", "--out", str(out), "--seed", "3"]
    assert main(argv) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "# seed=3" and len(lines) == 4
    assert main(argv[:4] + ["--gops", "a,b", "--out", str(out)]) == EXIT_USER
