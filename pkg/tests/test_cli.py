import json
import subprocess
import sys

import numpy as np
import pytest

from morphoscope.cli import config_hash, load_config, main
from morphoscope.io import read_nifti, write_nifti
from morphoscope.template import efc
from morphoscope.volume import Grid3, ScalarVolume, smooth

SMALL = {
    "registration": {"pyramid_levels": 2, "iters_per_level": 40},
    "template": {"bandwidth": 8.0, "outer_iters": 1},
}
CSV_OUTPUTS = ("cohort.csv", "scores.csv", "fits.csv", "quantile_selection.csv",
               "comparisons.csv", "groups.csv", "T60_build_log.csv", "T90_build_log.csv")


def _run_pipeline(root):
    cfg = root / "cfg.json"
    root.mkdir(parents=True, exist_ok=True)
    cfg.write_text(json.dumps(SMALL))
    common = ["--workdir", str(root), "--config", str(cfg)]
    steps = [
        ["phantom-gen", "--seed", "3", "--size", "32", "--n-cn", "8", "--n-ad", "5"] + common,
        ["template-build"] + common,
        ["aging-field", "--young", "T60", "--old", "T90", "--young-age", "60",
         "--old-age", "90"] + common,
        ["score"] + common,
        ["stats-fit"] + common,
        ["stats-compare"] + common,
    ]
    for argv in steps:
        assert main(argv) == 0, argv


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    roots = [tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")]
    for r in roots:
        _run_pipeline(r)
    return roots


def test_pipeline_csvs_are_byte_identical(pipeline_runs):
    a, b = pipeline_runs
    for name in CSV_OUTPUTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_pipeline_outputs_and_manifests(pipeline_runs):
    a, b = pipeline_runs
    assert (a / "T60_img.nii").exists()
    man = json.loads((a / "manifest_aging-field.json").read_text())
    assert man["details"]["scale"] == pytest.approx(1 / 30)
    assert man["details"]["gap_years"] == 30.0
    assert man["config_hash"] == config_hash(man["config"])
    for name in ("manifest_score.json", "manifest_stats-compare.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    header = (a / "comparisons.csv").read_text().splitlines()[0]
    assert header == "region,score_kind,pair,t,p_raw,p_bonf,stars,d,band"
    assert (a / "fits.csv").read_text().splitlines()[0] == "region,q,slope,intercept,r2,p"


def test_template_sharper_than_blurred(pipeline_runs):
    tpl = read_nifti(pipeline_runs[0] / "T60_img.nii")
    blurred = ScalarVolume(tpl.grid, smooth(tpl.data, 1.0))
    assert efc(tpl) < efc(blurred)


def test_efc_command(pipeline_runs, capsys):
    assert main(["efc", "--image", str(pipeline_runs[0] / "T60_img.nii")]) == 0
    value = float(capsys.readouterr().out.strip())
    assert 0 < value < 1


def test_register_command(tmp_path, pipeline_runs):
    a = pipeline_runs[0]
    out = tmp_path / "reg" / "v"
    assert main(["register", "--fixed", str(a / "T60_img.nii"), "--moving",
                 str(a / "T90_img.nii"), "--out", str(out), "--config",
                 str(a / "cfg.json")]) == 0
    assert (tmp_path / "reg" / "v_x.nii").exists()
    lines = (tmp_path / "reg" / "v_energy.csv").read_text().splitlines()
    energies = [float(l.split(",")[2]) for l in lines[1:]]
    assert len(energies) > 1


def test_config_hash_tracks_every_field():
    base = load_config()
    changed = load_config(overrides={"registration": {"lambda3": 0.02}})
    assert config_hash(base) == config_hash(load_config())
    assert config_hash(base) != config_hash(changed)
    assert config_hash(base) != config_hash(load_config(overrides={"stats": {"welch": True}}))


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"stats": {"reference_group": "CDR1"}}))
    assert load_config(cfg)["stats"]["reference_group"] == "CDR1"
    assert load_config(cfg, {"stats": {"reference_group": "CN"}})["stats"]["reference_group"] == "CN"


def test_exit_code_usage():
    with pytest.raises(SystemExit) as info:
        main(["score", "--no-such-flag"])
    assert info.value.code == 1


def test_exit_code_missing_input(tmp_path):
    assert main(["score", "--workdir", str(tmp_path)]) == 2
    assert main(["efc", "--image", str(tmp_path / "nope.nii")]) == 2


def test_exit_code_bad_nifti(tmp_path):
    (tmp_path / "bad.nii").write_bytes(b"\0" * 10)
    assert main(["efc", "--image", str(tmp_path / "bad.nii")]) == 2


@pytest.mark.parametrize("content", [
    "{not json", '{"bogus": 1}', '{"registration": {"lncc_window": 4}}',
    '{"scoring": {"quantiles": [0.95]}}', '{"scoring": {"regions": ["cortex"]}}',
])
def test_exit_code_config_validation(tmp_path, content):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    assert main(["stats-fit", "--workdir", str(tmp_path), "--config", str(cfg)]) == 3


def test_exit_code_numerical(tmp_path):
    g = Grid3((4, 4, 4))
    write_nifti(ScalarVolume(g, np.zeros(g.dims)), tmp_path / "z.nii")
    assert main(["efc", "--image", str(tmp_path / "z.nii")]) == 4


def test_help_documents_exit_codes():
    out = subprocess.run([sys.executable, "-m", "morphoscope.cli", "--help"],
                         capture_output=True, text=True, check=True).stdout
    for code in ("0  success", "1  usage", "2  i/o", "3  validation", "4  numerical"):
        assert code in out
