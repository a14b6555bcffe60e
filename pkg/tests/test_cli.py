"""End-to-end checks for the command line.

Everything runs in-process through cli.main so exit codes and stdout are
asserted directly.  The toy backend keeps full runs under a few seconds.
"""

import json

import numpy as np
import pytest
from PIL import Image

from relayout.cli import main
from relayout.layout import layout_from_boxes, save_layout


def _write_inputs(root, *, shift=16):
    """Source image + layouts for one movable object; returns path strings."""
    rng = np.random.default_rng(7)
    image = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    image_path = root / "source.png"
    Image.fromarray(image).save(image_path)

    src = layout_from_boxes(64, 64, [("cat", "cat", (8, 8, 16, 16))])
    tar = layout_from_boxes(64, 64, [("cat", "cat", (8 + shift, 8, 16, 16))])
    src_path = save_layout(src, root / "source_layout.json")
    tar_path = save_layout(tar, root / "target_layout.json")
    return str(image_path), str(src_path), str(tar_path)


@pytest.fixture()
def inputs(tmp_path):
    return _write_inputs(tmp_path)


def test_edit_writes_image_and_reports(inputs, tmp_path, capsys):
    image, src, tar = inputs
    out = tmp_path / "edited.png"
    code = main(["edit", "--image", image, "--layout", src,
                 "--target", tar, "--out", str(out)])
    captured = capsys.readouterr()
    assert code == 0
    assert out.is_file()
    with Image.open(out) as img:
        assert img.size == (64, 64)
    assert f"wrote: {out}" in captured.out
    assert "final region loss:" in captured.out
    # progress went to stderr, one line per step
    steps = [line for line in captured.err.splitlines() if line.startswith("step ")]
    assert len(steps) == 20
    assert steps[-1].startswith("step 20/20")
    manifest = json.loads((tmp_path / "edited.png.manifest.json").read_text())
    assert manifest["final_losses"]["cat"] < 0.3


def test_edit_telemetry_csv(inputs, tmp_path):
    image, src, tar = inputs
    out = tmp_path / "edited.png"
    csv_path = tmp_path / "losses.csv"
    code = main(["edit", "--image", image, "--layout", src, "--target", tar,
                 "--out", str(out), "--telemetry", str(csv_path)])
    assert code == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "step,cat,total"
    assert len(lines) == 21


def test_edit_lfin_flags_reach_manifest(inputs, tmp_path):
    image, src, tar = inputs
    out = tmp_path / "edited.png"
    code = main(["edit", "--image", image, "--layout", src, "--target", tar,
                 "--out", str(out), "--init", "lfin",
                 "--lfin-stop", "0.7", "--lfin-lambda", "0.5"])
    assert code == 0
    manifest = json.loads((tmp_path / "edited.png.manifest.json").read_text())
    assert manifest["start_step"] == 14
    assert manifest["spec"]["lfin"]["blend_lambda"] == 0.5


def test_edit_debug_dir_populated(inputs, tmp_path):
    image, src, tar = inputs
    out = tmp_path / "edited.png"
    debug = tmp_path / "debug"
    code = main(["edit", "--image", image, "--layout", src, "--target", tar,
                 "--out", str(out), "--debug-dir", str(debug)])
    assert code == 0
    assert debug.is_dir()
    assert any(debug.iterdir())


def test_edit_validation_failure_exits_2(inputs, tmp_path, capsys):
    image, src, _ = inputs
    other = layout_from_boxes(64, 64, [("dog", "dog", (8, 8, 16, 16))])
    other_path = save_layout(other, tmp_path / "other_layout.json")
    code = main(["edit", "--image", image, "--layout", src,
                 "--target", str(other_path), "--out", str(tmp_path / "o.png")])
    captured = capsys.readouterr()
    assert code == 2
    assert "ids-mismatch" in captured.err
    assert not (tmp_path / "o.png").exists()


def test_edit_unknown_backend_exits_3(inputs, tmp_path, capsys):
    image, src, tar = inputs
    code = main(["edit", "--image", image, "--layout", src, "--target", tar,
                 "--out", str(tmp_path / "o.png"), "--backend", "adapter:nope"])
    captured = capsys.readouterr()
    assert code == 3
    assert "backend error" in captured.err


def test_learn_then_edit_roundtrip(inputs, tmp_path, capsys):
    image, src, tar = inputs
    bundle_dir = tmp_path / "bundle"
    code = main(["learn-concepts", "--image", image, "--layout", src,
                 "--out", str(bundle_dir),
                 "--stage1-steps", "50", "--stage2-steps", "25"])
    captured = capsys.readouterr()
    assert code == 0
    assert (bundle_dir / "manifest.json").is_file()
    assert f"bundle: {bundle_dir}" in captured.out

    out = tmp_path / "edited.png"
    code = main(["edit", "--image", image, "--layout", src, "--target", tar,
                 "--out", str(out), "--concepts", str(bundle_dir)])
    assert code == 0
    assert out.is_file()


def test_validate_ok(inputs, tmp_path, capsys):
    job = tmp_path / "job.json"
    job.write_text(json.dumps({
        "image": "source.png",
        "layout": "source_layout.json",
        "target": "target_layout.json",
        "seed": 3,
    }))
    code = main(["validate", "--spec", str(job)])
    captured = capsys.readouterr()
    assert code == 0
    assert captured.out.strip().endswith("ok")


def test_validate_reports_findings(inputs, tmp_path, capsys):
    other = layout_from_boxes(64, 64, [("dog", "dog", (8, 8, 16, 16))])
    save_layout(other, tmp_path / "other_layout.json")
    job = tmp_path / "job.json"
    job.write_text(json.dumps({
        "image": "source.png",
        "layout": "source_layout.json",
        "target": "other_layout.json",
    }))
    code = main(["validate", "--spec", str(job)])
    captured = capsys.readouterr()
    assert code == 2
    assert "ids-mismatch" in captured.out
    assert "invalid: 1 error(s)" in captured.out


def test_validate_rejects_unknown_keys(inputs, tmp_path, capsys):
    job = tmp_path / "job.json"
    job.write_text(json.dumps({
        "image": "source.png",
        "layout": "source_layout.json",
        "target": "target_layout.json",
        "speed": "fast",
    }))
    code = main(["validate", "--spec", str(job)])
    captured = capsys.readouterr()
    assert code == 2
    assert "unknown job spec keys: speed" in captured.err


def test_validate_bad_config_value(inputs, tmp_path, capsys):
    job = tmp_path / "job.json"
    job.write_text(json.dumps({
        "image": "source.png",
        "layout": "source_layout.json",
        "target": "target_layout.json",
        "guidance": {"eta": -1.0},
    }))
    code = main(["validate", "--spec", str(job)])
    captured = capsys.readouterr()
    assert code == 2
    assert "config-invalid" in captured.err


def test_validate_malformed_json(tmp_path, capsys):
    job = tmp_path / "job.json"
    job.write_text("{not json")
    code = main(["validate", "--spec", str(job)])
    captured = capsys.readouterr()
    assert code == 2
    assert "json-parse" in captured.err


def test_eval_writes_report(tmp_path, capsys):
    case = tmp_path / "cases" / "case-a"
    case.mkdir(parents=True)
    rng = np.random.default_rng(5)
    image = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    Image.fromarray(image).save(case / "source.png")
    Image.fromarray(np.roll(image, 16, axis=1)).save(case / "edited.png")
    src = layout_from_boxes(64, 64, [("cat", "cat", (8, 8, 16, 16))])
    tar = layout_from_boxes(64, 64, [("cat", "cat", (24, 8, 16, 16))])
    save_layout(src, case / "source_layout.json")
    save_layout(tar, case / "target_layout.json")
    seg = case / "segmentation"
    seg.mkdir()
    Image.fromarray(np.asarray(tar.objects[0].mask, dtype=np.uint8) * 255).save(
        seg / "cat.png")

    report_path = tmp_path / "report.json"
    code = main(["eval", "--cases", str(tmp_path / "cases"),
                 "--out", str(report_path)])
    captured = capsys.readouterr()
    assert code == 0
    report = json.loads(report_path.read_text())
    assert report["summary"]["alignment"]["mean"] == 1.0
    assert report["summary"]["similarity"]["mean"] == pytest.approx(1.0)
    assert "alignment: mean 1.0000 over 1 case(s)" in captured.out


def test_eval_missing_dir_exits_2(tmp_path, capsys):
    code = main(["eval", "--cases", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "r.json")])
    captured = capsys.readouterr()
    assert code == 2
    assert "error:" in captured.err
