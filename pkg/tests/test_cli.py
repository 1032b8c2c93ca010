import time

import pytest

from fwd2bot.cli import build_config, config_defaults, main, parse_assignments
from fwd2bot.errors import ConfigError


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_help_lists_every_key_and_default(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0
    for key, default in config_defaults():
        assert f"{key} = {default}" in out
    for section in ("model.", "train.", "store.", "probe."):
        assert section + "d_model" in out or any(k.startswith(section) for k, _ in config_defaults())


def test_subcommand_help_also_lists_keys(capsys):
    code, out, _ = run(capsys, "train", "--help")
    assert code == 0 and "train.temperature = 1.0" in out


def test_config_parsing_and_unknown_keys(monkeypatch):
    monkeypatch.delenv("FWD2BOT_SEED", raising=False)
    cfg = build_config(parse_assignments(["model.k_summary = 4  # comment", "", "train.lr=0.01", "probe.gnuplot=true"]))
    assert cfg.model.k_summary == 4 and cfg.train.lr == 0.01 and cfg.probe.gnuplot is True
    with pytest.raises(ConfigError):
        build_config({"model.nonsense": "1"})
    with pytest.raises(ConfigError):
        build_config({"train.steps": "many"})
    with pytest.raises(ConfigError):
        parse_assignments(["no equals sign"])


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv("FWD2BOT_SEED", "17")
    assert build_config({"train.seed": "3"}).train.seed == 17


def test_usage_errors_exit_2(capsys):
    assert run(capsys, "frobnicate")[0] == 2
    code, _, err = run(capsys, "probe", "flops", "model.bogus=1")
    assert code == 2 and "unknown config key" in err


def test_io_error_exit_5(capsys, tmp_path):
    code, _, err = run(capsys, "compress", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", "x", "--out", "y")
    assert code == 5 and err.count("\n") == 1


def test_flops_full_scale_row(capsys):
    code, out, _ = run(capsys, "probe", "flops")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("mode,V,K,Q,G")
    assert lines[1].startswith("baseline,576,16,32,64,")


def test_storage_probe(capsys):
    code, out, _ = run(capsys, "probe", "storage")
    assert code == 0 and "16,4096,half,131072" in out


def test_probe_needs_checkpoint(capsys):
    assert run(capsys, "probe", "norms")[0] == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """dataset -> train 300 steps -> compress, on a small corpus."""
    d = tmp_path_factory.mktemp("cli")
    t0 = time.perf_counter()
    assert main(["dataset", "--seed", "1", "--n", "320", "--out", str(d / "data.txt")]) == 0
    assert main([
        "train", "--data", str(d / "data.txt"), "--out", str(d / "m.ckpt"),
        "train.steps=300", "train.pretrain_steps=300", "train.disc_warmup_steps=100", "train.heldout_scenes=64",
        "train.eval_every=300", "train.seed=1",
    ]) == 0
    assert main(["compress", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data.txt"), "--out", str(d / "s.bin")]) == 0
    return d, time.perf_counter() - t0


def test_smoke_generate_and_retrieve(capsys, pipeline):
    d, elapsed = pipeline
    capsys.readouterr()
    code, out, _ = run(capsys, "generate", "--ckpt", str(d / "m.ckpt"), "--store", str(d / "s.bin"),
                       "--image-id", "img00003", "--question", "how many circles")
    assert code == 0 and len(out.split()) >= 1
    code, out, _ = run(capsys, "retrieve", "--ckpt", str(d / "m.ckpt"), "--store", str(d / "s.bin"),
                       "--caption", "a red circle", "--topk", "3")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "query_id,rank,image_id,score" and len(lines) == 4
    assert (d / "m.ckpt.metrics.csv").read_text().startswith("step,L_AR,L_disc,qa_acc,r_at_1\n")
    assert elapsed < 600


def test_generate_missing_id_reports_lookup_error(capsys, pipeline):
    d, _ = pipeline
    capsys.readouterr()
    code, _, err = run(capsys, "generate", "--ckpt", str(d / "m.ckpt"), "--store", str(d / "s.bin"),
                       "--image-id", "img99999", "--question", "how many circles")
    assert code == 3 and "lookup error" in err and err.count("\n") == 1


def test_out_of_vocabulary_question(capsys, pipeline):
    d, _ = pipeline
    code, _, err = run(capsys, "generate", "--ckpt", str(d / "m.ckpt"), "--store", str(d / "s.bin"),
                       "--image-id", "img00000", "--question", "how many dragons")
    assert code == 3 and "out-of-vocabulary" in err


def test_model_probes_emit_csv(capsys, pipeline, tmp_path):
    d, _ = pipeline
    ck, data = str(d / "m.ckpt"), str(d / "data.txt")
    for which in ("attention", "mask", "prefix", "norms"):
        out = tmp_path / f"{which}.csv"
        code = main(["probe", which, "--ckpt", ck, "--data", data, "--out", str(out),
                     "train.heldout_scenes=64", "probe.n_questions=32", "probe.gnuplot=true"])
        assert code == 0 and out.read_text().count("\n") > 1
        assert out.with_suffix(".dat").read_text().startswith("# ")


def test_store_config_mismatch(capsys, pipeline, tmp_path):
    d, _ = pipeline
    assert main(["dataset", "--seed", "2", "--n", "40", "--out", str(tmp_path / "x.txt")]) == 0
    code = main(["train", "--data", str(tmp_path / "x.txt"), "--out", str(tmp_path / "k4.ckpt"),
                 "model.k_summary=4", "train.steps=1", "train.pretrain_steps=1", "train.heldout_scenes=8",
                 "train.batch_size=4", "train.eval_every=0", "train.eval_pairs=4", "train.eval_questions=4"])
    assert code == 0
    capsys.readouterr()
    code, _, err = run(capsys, "generate", "--ckpt", str(tmp_path / "k4.ckpt"), "--store", str(d / "s.bin"),
                       "--image-id", "img00000", "--question", "how many circles")
    assert code == 2 and "config mismatch" in err
