import pytest

from crcrisk.cli import main

TINY_INI = """\
[run]
seed = 2
[synth]
n_patients = 24
slide_px = 64,64
[transformer]
n_layers = 1
n_heads = 2
model_dim = 8
mlp_dim = 16
feat_dim = 6
max_slots = 16
region_side = 4
[train]
pretrain_epochs = 1
finetune_epochs = 1
batch_size = 8
max_regions_eval = 4
[experiment]
n_repeats = 2
cv_folds = 3
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)

    def go(*args, out):
        return main([args[0], "--config", str(ini), "--out", str(root / out), *args[1:]])

    go.root = root
    return go


@pytest.fixture(scope="module")
def artifacts(run):
    root = run.root
    for tag in ("a", "b"):
        assert run("synth", out=f"synth_{tag}") == 0
        assert run("pretrain", out=f"pre_{tag}") == 0
        assert run("train", "--checkpoint", str(root / f"pre_{tag}/pretrained.ckpt"), "--mode", "guided-full",
                   out=f"train_{tag}") == 0
        assert run("eval", "--checkpoint", str(root / f"pre_{tag}/pretrained.ckpt"),
                   "--pipeline", "wsi", "--pipeline", "wsi+clinical", out=f"eval_{tag}") == 0
        assert run("explain", "--kind", "attention-diff", "--n-slides", "2",
                   "--pretrained", str(root / f"pre_{tag}/pretrained.ckpt"),
                   "--finetuned", str(root / f"train_{tag}/guided-full.ckpt"), out=f"explain_{tag}") == 0
        assert run("report", "--run", str(root / f"eval_{tag}"), out=f"report_{tag}") == 0
    return root


def _files(d):
    return sorted(p.relative_to(d) for p in d.rglob("*") if p.is_file())


@pytest.mark.parametrize("step", ["synth", "pre", "train", "eval", "explain", "report"])
def test_reruns_are_byte_identical(artifacts, step):
    a, b = artifacts / f"{step}_a", artifacts / f"{step}_b"
    files = _files(a)
    assert files and files == _files(b)
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_expected_outputs(artifacts):
    assert (artifacts / "synth_a/cohort/manifest.json").exists()
    assert (artifacts / "eval_a/pvalues.csv").read_text().count("\n") == 2
    assert (artifacts / "report_a/auc.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert len(list((artifacts / "explain_a/overlays").glob("*.png"))) == 2


def test_unknown_pipeline_is_config_error(run, capsys):
    assert run("eval", "--pipeline", "wsi+xray", out="bad") == 2
    assert "valid tokens" in capsys.readouterr().err


def test_missing_artifacts_exit_3(run):
    assert run("train", "--checkpoint", "/nonexistent.ckpt", out="bad") == 3
    assert run("eval", "--pipeline", "clinical", "--cohort", "/nonexistent", out="bad") == 3
    assert run("report", "--run", str(run.root / "nowhere"), out="bad") == 3


def test_set_override_reaches_config_echo(run):
    assert run("synth", "--set", "synth.n_patients=6", out="small") == 0
    assert "n_patients = 6" in (run.root / "small/config.ini").read_text()
    assert run("synth", "--set", "synth.colour=1", out="small2") == 2


def test_shapley_explain(run, artifacts, capsys):
    assert run("explain", "--kind", "shapley", "--pipeline", "colonoscopy", "--max-instances", "5",
               out="shap") == 0
    assert (run.root / "shap/shapley.csv").read_text().startswith("group,mean,std,rank")
    assert run("report", out="shap") == 0
    assert (run.root / "shap/shapley_top10.png").exists()
