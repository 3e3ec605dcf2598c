import csv
import json

import pytest

from cooptrack import numerics
from cooptrack.cli import EXIT_CHECK, EXIT_OK, EXIT_VALIDATION, main, sha256_file
from cooptrack.config import Config, dump_config, load_config, parse_config, save_config


def tiny_config(path, **kw):
    base = dict(d=16, tau=2, n_fresh=12, n_heads=2, n_objects=6, n_scenarios=2, n_train=1, duration_s=0.5,
                epochs_stage1=1, epochs_stage2=1)
    base.update(kw)
    save_config(Config(**base), path)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = tiny_config(root / "tiny.cfg")
    out = root / "out"
    assert main(["train", "--stage", "1", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert main(["train", "--stage", "2", "--config", cfg, "--out", str(out)]) == EXIT_OK
    return cfg, out


def test_config_round_trip():
    cfg = Config(d=16, lr=3e-4, latency_levels=(0, 50))
    assert parse_config(dump_config(parse_config(dump_config(cfg)))) == cfg


def test_gen_manifest_is_deterministic_and_complete(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "a.cfg")
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "x")]) == EXIT_OK
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "y")]) == EXIT_OK
    a = (tmp_path / "x" / "manifest.json").read_bytes()
    assert a == (tmp_path / "y" / "manifest.json").read_bytes()
    man = json.loads(a)
    assert len(man["files"]) == 2
    for f in man["files"]:
        path = tmp_path / "x" / f["path"]
        assert path.stat().st_size == f["size"] and sha256_file(path) == f["sha256"]
    repro = json.loads((tmp_path / "x" / "repro.json").read_text())
    assert repro["config_digest"] == load_config(cfg).digest() and "code_version" in repro and repro["seed"] == 0


def test_gen_frame_rate_scales_frame_count(tmp_path):
    counts = {}
    for hz in (2.0, 10.0):
        cfg = tiny_config(tmp_path / f"{hz}.cfg", rate_hz=hz, duration_s=2.0)
        assert main(["gen", "--config", cfg, "--out", str(tmp_path / str(hz))]) == EXIT_OK
        counts[hz] = json.loads((tmp_path / str(hz) / "manifest.json").read_text())["files"][0]["frames"]
    assert counts[10.0] == 5 * counts[2.0]


def test_stage2_without_stage1_names_missing_files(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "a.cfg")
    code = main(["train", "--stage", "2", "--config", cfg, "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert code == EXIT_VALIDATION and "stage1.ckpt" in err and "stage1.ckpt.json" in err


def test_train_writes_checkpoint_and_loss_csv(trained):
    _, out = trained
    for stage in (1, 2):
        assert (out / f"stage{stage}.ckpt").exists()
        rows = list(csv.reader(open(out / f"loss_stage{stage}.csv")))
        assert rows[0] == ["step", "lr", "L_bbx", "L_cls", "L_asso", "total"] and len(rows) > 1
    meta = json.loads((out / "stage2.ckpt.json").read_text())
    assert meta["stage"] == 2


def test_resume_continues_step_counter(trained, tmp_path):
    cfg, out = trained
    before = json.loads((out / "stage1.ckpt.json").read_text())["steps"]
    assert main(["train", "--stage", "1", "--config", cfg, "--out", str(tmp_path),
                 "--resume", str(out / "stage1.ckpt")]) == EXIT_OK
    after = json.loads((tmp_path / "stage1.ckpt.json").read_text())["steps"]
    assert after == 2 * before
    rows = list(csv.reader(open(tmp_path / "loss_stage1.csv")))
    assert int(rows[1][0]) == before + 1
    assert main(["train", "--stage", "2", "--config", cfg, "--out", str(tmp_path),
                 "--resume", str(out / "stage1.ckpt")]) == EXIT_VALIDATION


def test_eval_modes_and_checkpoint_stage(trained, tmp_path):
    cfg, out = trained
    ev = tmp_path / "ev"
    s1, s2 = str(out / "stage1.ckpt"), str(out / "stage2.ckpt")
    assert main(["eval", "--config", cfg, "--out", str(ev), "--mode", "coop", "--checkpoint", s1]) == EXIT_VALIDATION
    assert main(["eval", "--config", cfg, "--out", str(ev), "--mode", "no_fusion,late_fusion",
                 "--checkpoint", s1]) == EXIT_OK
    assert main(["eval", "--config", cfg, "--out", str(ev), "--mode", "coop", "--checkpoint", s2]) == EXIT_OK
    rows = {r["mode"]: r for r in csv.DictReader(open(ev / "metrics.csv"))}
    assert list(rows) == ["coop", "no_fusion", "late_fusion"]
    assert float(rows["no_fusion"]["bps"]) == 0.0
    for name in ("metric_bars.svg", "bps_bubble.svg", "outputs_coop.jsonl", "repro.json"):
        assert (ev / name).exists()
    assert main(["eval", "--config", cfg, "--out", str(ev), "--mode", "dense", "--checkpoint", s2]) == EXIT_VALIDATION


def test_eval_rejects_foreign_benchmark(trained, tmp_path):
    cfg, out = trained
    other = tiny_config(tmp_path / "b.cfg", n_objects=7)
    assert main(["gen", "--config", other, "--out", str(tmp_path / "bench")]) == EXIT_OK
    code = main(["eval", "--config", cfg, "--out", str(tmp_path / "ev"), "--mode", "coop",
                 "--checkpoint", str(out / "stage2.ckpt"), "--benchmark", str(tmp_path / "bench")])
    assert code == EXIT_VALIDATION


def test_sweep_latency_and_empty_levels(trained, tmp_path):
    cfg, out = trained
    ck = str(out / "stage2.ckpt")
    assert main(["sweep", "--kind", "latency", "--levels", "", "--config", cfg, "--out", str(tmp_path),
                 "--checkpoint", ck]) == EXIT_VALIDATION
    assert main(["sweep", "--kind", "latency", "--levels", "0,100", "--config", cfg, "--out", str(tmp_path),
                 "--checkpoint", ck]) == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "sweep_latency.csv")))
    assert [r[0] for r in rows[1:]] == ["0.0", "100.0"]
    assert (tmp_path / "sweep_latency.svg").exists()


def test_bad_config_is_a_validation_error(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("d = 10\nblock = 8\n")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert main(["frobnicate"]) == EXIT_VALIDATION


def test_check_oracle_group_passes(capsys):
    assert main(["check", "--group", "oracle"]) == EXIT_OK
    assert "checks passed" in capsys.readouterr().out


def test_check_unknown_name(capsys):
    assert main(["check", "--only", "numerics.Nope"]) == EXIT_VALIDATION


def test_injected_gradient_bug_is_named(monkeypatch, capsys):
    real = numerics.Linear.backward

    def broken(self, cache, g):
        out = real(self, cache, g)
        self.store.grads[self.wn] *= 1.1
        return out

    monkeypatch.setattr(numerics.Linear, "backward", broken)
    assert main(["check", "--only", "numerics.Linear,numerics.l1_loss"]) == EXIT_CHECK
    out = capsys.readouterr().out
    assert "FAIL  numerics.Linear" in out and "PASS  numerics.l1_loss" in out
    assert "failed: numerics.Linear" in out
    # per-check wall time
    assert all(line.split()[2].endswith("s") for line in out.splitlines() if line.startswith(("PASS", "FAIL")))
