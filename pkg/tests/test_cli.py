import pytest

from tdc_detector.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, build_parser, main


def test_calibrate_tdc(capsys):
    assert main(["calibrate-tdc"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "coarse=22 fine=28 nominal=64/128" in out


def test_bad_config_file(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[victims]\nn_victims = 'many'\n")
    assert main(["--config", str(path), "calibrate-tdc"]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "nope.toml"), "gen-victims"]) == EXIT_CONFIG


@pytest.mark.parametrize("command", [["train-detector"], ["eval"], ["cam"], ["avoid"]])
def test_missing_corpus(tmp_path, command):
    assert main(["--out", str(tmp_path), *command]) == EXIT_DATA


def test_parser():
    args = build_parser().parse_args(["--seed", "3", "--full-scale", "table", "unseen"])
    assert args.seed == 3 and args.full_scale and args.name == "unseen"
    with pytest.raises(SystemExit):
        build_parser().parse_args(["table", "nonsense"])
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_cli_reuses_manifest_written_through_the_api(tmp_path, monkeypatch):
    from tdc_detector import harness
    from tdc_detector.config import load_config

    recipe = load_config(None, {"output_dir": str(tmp_path)}).recipe
    manifest = harness.open_manifest(recipe)
    manifest.timings["victims"] = 1.5
    manifest.write(tmp_path)

    seen = []

    def fake_gen_victims(recipe, manifest):
        seen.append(manifest)
        return [], None, None

    monkeypatch.setattr(harness, "gen_victims", fake_gen_victims)
    assert main(["--out", str(tmp_path), "gen-victims"]) == EXIT_OK
    assert seen[0].config_hash == manifest.config_hash
    assert seen[0].timings == {"victims": 1.5}
