import json
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from facadeseg import cli
from facadeseg.architectures import ArchitectureSpec, build
from facadeseg.training import load_checkpoint, load_preset
from facadeseg.weights_io import decode_weights


def run(*args):
    return cli.main([str(a) for a in args])


def files_of(directory, skip=("run.json",)):
    out = {}
    for name in sorted(os.listdir(directory)):
        if name not in skip:
            with open(os.path.join(directory, name), "rb") as fh:
                out[name] = fh.read()
    return out


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run("synth", "--n", 3, "--seed", 4, "--out", d) == 0
    return d


def test_synth_is_deterministic(tmp_path, synth_dir):
    assert run("synth", "--n", 3, "--seed", 4, "--out", tmp_path) == 0
    assert files_of(tmp_path) == files_of(synth_dir)
    assert len([n for n in os.listdir(tmp_path) if n.endswith(".png")]) == 3


def test_run_record_has_hash_seed_and_no_clock(synth_dir):
    rec = json.loads((synth_dir / "run.json").read_text())
    assert rec["seed"] == 4 and len(rec["config_hash"]) == 64
    assert set(rec["versions"]) >= {"facadeseg", "numpy", "kernels"}
    assert "time" not in json.dumps(rec).lower()


def test_synth_zero_images_is_invalid(tmp_path, capsys):
    assert run("synth", "--n", 0, "--out", tmp_path) == 1
    assert "--n" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 1, "synth": {"n": 2, "width": 32, "height": 32}}))
    out = tmp_path / "o"
    assert run("synth", "--config", cfg, "--width", 40, "--out", out) == 0
    with Image.open(out / "synth0_0000.png") as im:
        assert im.size == (40, 32)
    assert len(list(out.glob("*.png"))) == 2
    cfg.write_text(json.dumps({"version": 9}))
    assert run("synth", "--config", cfg, "--n", 1, "--out", out) == 1


def _write_scene(tmp_path, features, heading=True, image=True):
    fp = tmp_path / "fp.geojson"
    fp.write_text(json.dumps({"type": "FeatureCollection", "features": features}))
    if image:
        pano = np.random.default_rng(0).integers(0, 255, (64, 128, 3), dtype=np.uint8)
        Image.fromarray(pano).save(tmp_path / "s1.png")
    rec = {"id": "s1", "image_path": "s1.png", "x": 10, "y": 10}
    if heading:
        rec["heading_deg"] = 0
    sp = tmp_path / "spheres.json"
    sp.write_text(json.dumps({"photospheres": [rec]}))
    return fp, sp


SQUARE = [{"type": "Feature", "id": "b", "geometry": {"type": "Polygon", "coordinates": [[[0, 0], [20, 0], [20, 20], [0, 20], [0, 0]]]}}]


def test_extract_square_gives_four_facades(tmp_path):
    fp, sp = _write_scene(tmp_path, SQUARE)
    out = tmp_path / "out"
    assert run("extract", "--footprints", fp, "--spheres", sp, "--height", 4, "--mpp", 0.2, "--out", out) == 0
    pngs = sorted(p.name for p in out.glob("*.png"))
    assert len(pngs) == 4 and all(n.endswith("__s1.png") for n in pngs)
    side = json.loads((out / pngs[0].replace(".png", ".json")).read_text())
    # 20 m wall plus 2 m at each end at 0.2 m per pixel
    assert side["width"] == 120 and side["height"] == 20 and side["photosphere_id"] == "s1"


def test_extract_nothing_to_do(tmp_path):
    fp, sp = _write_scene(tmp_path, [])
    assert run("extract", "--footprints", fp, "--spheres", sp, "--out", tmp_path / "o") == 0
    rec = json.loads((tmp_path / "o" / "run.json").read_text())
    assert rec["summary"]["images"] == 0


def test_extract_missing_heading_is_invalid(tmp_path, capsys):
    fp, sp = _write_scene(tmp_path, SQUARE, heading=False)
    assert run("extract", "--footprints", fp, "--spheres", sp, "--out", tmp_path / "o") == 1
    assert "heading_deg" in capsys.readouterr().err


def test_extract_all_spheres_unreadable_is_runtime_failure(tmp_path):
    fp, sp = _write_scene(tmp_path, SQUARE, image=False)
    with pytest.warns(UserWarning):
        assert run("extract", "--footprints", fp, "--spheres", sp, "--out", tmp_path / "o") == 2


def test_missing_input_file_is_invalid(tmp_path):
    assert run("extract", "--footprints", tmp_path / "nope", "--spheres", tmp_path / "nope", "--out", tmp_path) == 1


@pytest.fixture(scope="module")
def masks_dir(tmp_path_factory, synth_dir):
    d = tmp_path_factory.mktemp("masks")
    assert run("rasterize", "--annotations", synth_dir, "--out", d) == 0
    return d


def test_rasterize_writes_masks_and_stats(masks_dir):
    names = os.listdir(masks_dir)
    assert sum(n.endswith(".mask.json") for n in names) == 3
    stats = json.loads((masks_dir / "class_stats.json").read_text())
    assert stats["window"]["frequency"] > 0


def test_rasterize_unknown_vocabulary(tmp_path, synth_dir):
    assert run("rasterize", "--annotations", synth_dir, "--vocabulary", "xyz", "--out", tmp_path) == 1


def test_eval_prediction_equal_to_truth(tmp_path, masks_dir):
    assert run("eval", "--pred", masks_dir, "--gt", masks_dir, "--boundary", 1, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "metrics.json").read_text())
    for name, row in doc["classes"].items():
        assert row["acc"] == 1.0
        if row["counts"]["tp"]:
            assert row["p"] == row["r"] == row["f1"] == 1.0
            assert row["p_ob"] == row["r_ob"] == row["f1_ob"] == 1.0
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "class,Acc,P,R,F1,P_ob,R_ob,F1_ob"


def test_eval_negative_boundary_invalid(tmp_path, masks_dir):
    assert run("eval", "--pred", masks_dir, "--gt", masks_dir, "--boundary", -1, "--out", tmp_path) == 1


def test_train_zero_iterations_equals_initialisation(tmp_path, synth_dir):
    assert run("train", "--data", synth_dir, "--iterations", 0, "--seed", 3, "--out", tmp_path) == 0
    net, manifest = load_checkpoint(tmp_path / "model.weights")
    ref = build(ArchitectureSpec.from_dict(load_preset("toy-multihead")["architecture"]), seed=3)
    got = net.named_parameters()
    for p in ref.parameters():
        assert np.array_equal(p.data, got[p.name].data)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, synth_dir):
    d = tmp_path_factory.mktemp("train")
    assert run("train", "--data", synth_dir, "--iterations", 2, "--out", d) == 0
    return d


def test_training_rerun_is_byte_identical(tmp_path, synth_dir, trained):
    assert run("train", "--data", synth_dir, "--iterations", 2, "--out", tmp_path) == 0
    assert files_of(tmp_path) == files_of(trained)
    entries, manifest = decode_weights((trained / "model.weights").read_bytes())
    assert manifest["architecture"]["head"] == "multihead"


def test_train_unknown_preset(tmp_path, synth_dir, capsys):
    assert run("train", "--data", synth_dir, "--preset", "nope", "--out", tmp_path) == 1
    assert "available" in capsys.readouterr().err


def test_infer_then_eval(tmp_path, synth_dir, masks_dir, trained):
    img = synth_dir / "synth4_0000.png"
    out = tmp_path / "pred"
    assert run("infer", "--weights", trained / "model.weights", "--image", img, "--out", out) == 0
    assert (out / "synth4_0000.window.POS_renorm.tif").exists()
    with Image.open(out / "synth4_0000.labels.png") as im:
        assert im.mode == "P" and im.size == (64, 64)
    gt = tmp_path / "gt"
    gt.mkdir()
    for name in os.listdir(masks_dir):
        if name.startswith("synth4_0000."):
            (gt / name).write_bytes((masks_dir / name).read_bytes())
    assert run("eval", "--pred", out, "--gt", gt, "--out", tmp_path / "ev") == 0
    doc = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert all(0 <= r["acc"] <= 1 for r in doc["classes"].values())


def test_infer_ecp_composite_needs_ecp_classes(tmp_path, synth_dir, trained):
    img = synth_dir / "synth4_0000.png"
    code = run("infer", "--weights", trained / "model.weights", "--image", img, "--composite", "ecp", "--out", tmp_path)
    assert code == 1


def test_console_entry_point_exit_code(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "facadeseg.cli", "synth", "--n", "0", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 1 and "error" in proc.stderr
