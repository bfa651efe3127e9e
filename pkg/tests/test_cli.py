import json
import os
import shutil
import subprocess
from pathlib import Path

import pytest

from rnnt_ilm import cli
from rnnt_ilm import config as C
from rnnt_ilm import manifest as MF

TINY = {
    "task": {"n_train": 40, "n_dev": 6, "n_test": 6, "n_cross_dev": 6, "n_cross_test": 6, "n_text": 200,
             "vocab_size": 5, "feat_dim": 3},
    "model": {"enc_layers": 1, "enc_units": 8, "pred_units": 8, "embed_dim": 4, "joint_units": 8},
    "rnnt_train": {"epochs": 2},
    "dr_lm_train": {"epochs": 1},
    "mini_ilm_train": {"epochs": 1},
    "ilmt_train": {"epochs": 1},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    d, m = root / "data", root / "models"
    assert run("gen-data", "--config", cfg, "--out", d) == 0
    assert run("train-rnnt", "--config", cfg, "--data", d / "in", "--out", m / "rnnt.json") == 0
    assert run("train-lm", "--config", cfg, "--text", d / "text_cross.txt", "--data", d / "in",
               "--out", m / "lm.json") == 0
    assert run("train-ilm", "--config", cfg, "--data", d / "in", "--model", m / "rnnt.json",
               "--out", m / "mini.json") == 0
    return root, cfg


def digests_of(out):
    return json.loads(MF.manifest_path(out).read_text())["outputs"]


def test_rerun_is_noop(work, capsys):
    root, cfg = work
    before = MF.manifest_path(root / "data").read_text()
    assert run("gen-data", "--config", cfg, "--out", root / "data") == 0
    assert "up to date" in capsys.readouterr().out
    assert MF.manifest_path(root / "data").read_text() == before


def test_identical_runs_identical_digests_and_seed_changes_them(work, tmp_path):
    root, cfg = work
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "b", "--seed", 5) == 0
    ours = {Path(k).relative_to(root).as_posix(): v for k, v in digests_of(root / "data").items()
            if not k.endswith(".config.json")}
    same = {Path(k).relative_to(tmp_path).as_posix().replace("a/", "data/", 1): v
            for k, v in digests_of(tmp_path / "a").items() if not k.endswith(".config.json")}
    other = {Path(k).relative_to(tmp_path).as_posix().replace("b/", "data/", 1): v
             for k, v in digests_of(tmp_path / "b").items() if not k.endswith(".config.json")}
    assert ours == same
    assert ours["data/in/train.feats"] != other["data/in/train.feats"]


def test_manifest_lists_every_output(work):
    root, _ = work
    summary = MF.run_manifest(root)
    leftovers = [p for p in summary["unlisted"] if not p.endswith("tiny.json")]
    assert leftovers == [] and summary["modified"] == []
    rec = json.loads(MF.manifest_path(root / "models" / "rnnt.json").read_text())
    assert rec["seeds"] == {"seed": 0} and str(root / "data" / "in" / "train.feats") in rec["inputs"]
    assert Path(rec["config_file"]).exists() and rec["wall_clock_s"] >= 0


def _decode(work, out, *extra):
    root, cfg = work
    return run("decode", "--config", cfg, "--data", root / "data" / "cross", "--split", "dev",
               "--model", root / "models" / "rnnt.json", "--lm", root / "models" / "lm.json",
               "--beam", 4, "--out", out, *extra)


def test_ilm_scale_zero_equals_shallow_fusion(work, tmp_path):
    assert _decode(work, tmp_path / "sf.tsv", "--lm-scale", 0.6) == 0
    assert _decode(work, tmp_path / "ilm0.tsv", "--lm-scale", 0.6, "--ilm-variant", "mini-lstm",
                   "--ilm-model", work[0] / "models" / "mini.json", "--ilm-scale", 0) == 0
    assert (tmp_path / "sf.tsv").read_text() == (tmp_path / "ilm0.tsv").read_text()


def test_sweep_optimum_reproduced_by_decode(work, tmp_path, capsys):
    root, cfg = work
    out = tmp_path / "sweep.csv"
    assert run("sweep", "--config", cfg, "--data", root / "data" / "cross", "--model", root / "models" / "rnnt.json",
               "--lm", root / "models" / "lm.json", "--ilm-variant", "zero", "--beam", 4, "--step", 0.4,
               "--out", out) == 0
    best = json.loads(Path(str(out) + ".best.json").read_text())
    assert best["cells"] == 4 * 3
    assert _decode(work, tmp_path / "best.tsv", "--lm-scale", best["lm_scale"], "--ilm-variant", "zero",
                   "--ilm-scale", best["ilm_scale"]) == 0
    assert run("evaluate", "--data", root / "data" / "cross", "--split", "dev", "--hyp", tmp_path / "best.tsv",
               "--out", tmp_path / "eval.json") == 0
    assert json.loads((tmp_path / "eval.json").read_text())["wer"] == best["wer"]


def test_analyze_writes_table(work, tmp_path):
    root, cfg = work
    out = tmp_path / "analysis"
    assert run("analyze", "--config", cfg, "--data", root / "data" / "cross", "--model", root / "models" / "rnnt.json",
               "--lm", root / "models" / "lm.json", "--beam", 3, "--step", 0.6, "--length-rewards", 1,
               "--out", out) == 0
    lines = (out / "analysis.csv").read_text().splitlines()
    assert len(lines) == 6 and lines[0].startswith("system,lm_scale")


def test_exit_codes(work, tmp_path, capsys):
    root, cfg = work
    with pytest.raises(SystemExit) as e:
        run("decode", "--bogus", "--out", tmp_path / "x")
    assert e.value.code == cli.EXIT_USAGE
    assert _decode((tmp_path, cfg), tmp_path / "x.tsv") == cli.EXIT_MISSING_INPUT
    # a corpus with a larger vocabulary than the model
    other = json.loads(json.dumps(TINY))
    other["task"]["vocab_size"] = 6
    (tmp_path / "v6.json").write_text(json.dumps(other))
    assert run("gen-data", "--config", tmp_path / "v6.json", "--out", tmp_path / "v6") == 0
    assert run("decode", "--data", tmp_path / "v6" / "cross", "--model", root / "models" / "rnnt.json",
               "--out", tmp_path / "v.tsv") == cli.EXIT_VOCAB_MISMATCH
    bad = tmp_path / "bad.json"
    bad.write_text((root / "models" / "rnnt.json").read_text()[:300])
    assert run("decode", "--data", root / "data" / "cross", "--model", bad,
               "--out", tmp_path / "b.tsv") == cli.EXIT_BAD_FORMAT
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert _decode(work, blocker / "x.tsv") == cli.EXIT_UNWRITABLE
    assert run("train-ilm", "--data", root / "data" / "in", "--model", root / "models" / "rnnt.json",
               "--loss", "exact", "--out", tmp_path / "m.json") == cli.EXIT_MISSING_INPUT


def test_flag_defaults_match_presets():
    p = cli.build_parser()
    dec = p.parse_args(["decode", "--data", "d", "--model", "m", "--out", "o"])
    assert (dec.beam, dec.score_beam, dec.recomb, dec.topology) == (128, 12.0, "sum", None)
    assert p.parse_args(["train-ilmt", "--data", "d", "--model", "m", "--out", "o"]).alpha == 0.2
    assert p.parse_args(["train-ilm", "--data", "d", "--model", "m", "--out", "o"]).alpha == 1.0
    cfg = C.ExperimentConfig()
    assert (cfg.fusion.beam, cfg.fusion.score_beam, cfg.ilmt_alpha, cfg.exact_alpha) == (128, 12.0, 0.2, 1.0)
    assert cfg.ilmt_train.epochs == 5


def test_config_round_trip_and_env(tmp_path):
    cfg = C.acceptance_preset(3)
    back = C.from_dict(json.loads(cfg.to_json()))
    assert back == cfg
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    env = {"RNNT_ILM_DATA_DIR": "/elsewhere", "RNNT_ILM_SEED": "9"}
    loaded = C.load_config(path, env)
    assert loaded.paths.data_dir == "/elsewhere" and loaded.seed == 3
    with pytest.raises(ValueError):
        C.from_dict({"task": {"vocab": 3}})


@pytest.mark.skipif(shutil.which("rnnt-ilm") is None, reason="console script not installed")
def test_pipeline_script_completes(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    script = Path(__file__).resolve().parents[1] / "scripts" / "run_pipeline.sh"
    env = dict(os.environ, BEAM="3", STEP="0.6")
    proc = subprocess.run(["bash", str(script), str(cfg), str(tmp_path / "w")], env=env,
                          capture_output=True, text=True, timeout=900)
    assert proc.returncode == 0, proc.stderr
    out = tmp_path / "w" / "out"
    assert (out / "analysis" / "analysis.txt").exists()
    for name in ("sf", "density-ratio", "zero", "avg", "mini-plain", "mini-exact"):
        assert (out / f"test_{name}.json").exists()
    assert "unlisted artifacts: []" in proc.stdout
