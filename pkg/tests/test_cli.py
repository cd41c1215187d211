import csv
import json

import numpy as np
import pytest

from adcinv import cli
from adcinv.fem import SolverError
from adcinv.mesh import read_mesh
from adcinv.voxel import VoxelGrid, read_voxels, write_voxels


def run(tmp_path, command, config, out="out", extra=()):
    cfg = tmp_path / f"{command}.json"
    cfg.write_text(json.dumps(config))
    code = cli.main([command, "--config", str(cfg), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_mesh_gen_layout(tmp_path):
    code, out = run(tmp_path, "mesh-gen", {"phantom": {"resolution": 4, "variant": "three_domain"}})
    assert code == 0
    assert read_mesh(out / "mesh.txt").num_tets == 384
    assert (out / "fields" / "mesh.vtk").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == cli.config_hash({"phantom": {"resolution": 4, "variant": "three_domain"}})
    assert {"adcinv", "numpy", "scipy", "python"} <= set(manifest["versions"])
    assert manifest["exit_code"] == 0


def test_missing_key_reports_path(tmp_path, capsys):
    code, _ = run(tmp_path, "invert", {"observations": "x.json", "k": 10, "reg": {"alpha": 1e-4, "beta": 1.0}})
    assert code == 2
    err = capsys.readouterr().err
    assert "$.reg" in err and "gamma" in err


def test_unknown_key_rejected(tmp_path, capsys):
    code, _ = run(tmp_path, "mesh-gen", {"phantom": {"resolution": 4, "variant": "three_domain", "colour": 1}})
    assert code == 2
    assert "$.phantom" in capsys.readouterr().err


def test_wrong_type_and_bad_json(tmp_path, capsys):
    code, _ = run(tmp_path, "forward", {"mesh": {"path": "m.txt"}, "D": {}, "dt": "big", "k": 2, "boundary": 0.0})
    assert code == 2 and "$.dt" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["mesh-gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_mesh_error_is_config_error(tmp_path):
    code, out = run(tmp_path, "mesh-gen", {"phantom": {"resolution": 4, "variant": "two_domain"}})
    assert code == 2
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == 2


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise SolverError("factorization failed", 1.0)

    monkeypatch.setattr(cli, "forward_solve", boom)
    code, _ = run(tmp_path, "forward", {"mesh": {"phantom": {"resolution": 4, "variant": "three_domain"}},
                                        "D": {}, "dt": 1.0, "k": 2, "boundary": 0.5})
    assert code == 3


def test_forward_command(tmp_path):
    code, out = run(tmp_path, "forward", {"mesh": {"phantom": {"resolution": 4, "variant": "three_domain"}},
                                          "D": {"grey": 4.0}, "dt": 1.0, "k": 3, "boundary": 0.5, "u0": 0.5})
    assert code == 0
    manifest = json.loads((out / "fields" / "manifest.json").read_text())
    assert manifest["k"] == 3 and len(manifest["files"]) == 4
    assert np.allclose(np.loadtxt(out / "fields" / "u_0003.txt", skiprows=1), 0.5)
    assert (out / "fields" / "u_final.vtk").exists()


def _synth(tmp_path, out="synth", seed="3", noise=0.0):
    mesh_cfg = {"phantom": {"resolution": 8, "variant": "two_domain", "cavity_cells": 2}}
    return run(tmp_path, "synth", {"mesh": mesh_cfg, "dt_gen": 2.4, "n_obs": 10, "noise_amp": noise}, out,
               ["--seed", seed])


def test_synth_then_invert_recovers_D(tmp_path):
    code, synth = _synth(tmp_path)
    assert code == 0
    obs = json.loads((synth / "observations.json").read_text())
    assert obs["mesh"] == "mesh.txt" and obs["seed"] == 3 and len(obs["field_files"]) == 10
    code, out = run(tmp_path, "invert", {"observations": "synth/observations.json", "k": 10,
                                         "reg": {"alpha": 1e-6, "beta": 1e-4, "gamma": 0.0}, "truth": {},
                                         "optimizer": {"max_iter": 300}}, "inv")
    assert code == 0
    (row,) = read_rows(out / "results.csv")
    assert abs(float(row["D2_rel"])) < 0.05 and abs(float(row["D3_rel"])) < 0.05
    control = json.loads((out / "control.json").read_text())
    assert control["D_mm2_per_h"]["grey"] == pytest.approx(4.0, rel=0.05)
    assert (out / "fields" / "state_final.vtk").exists()


def test_rerun_is_reproducible(tmp_path):
    _synth(tmp_path, "a", noise=0.3)
    _synth(tmp_path, "b", noise=0.3)
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.is_file())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir() if p.is_file())
    for name in files:
        a, b = (tmp_path / "a" / name).read_text(), (tmp_path / "b" / name).read_text()
        if name == "manifest.json":
            a, b = json.loads(a), json.loads(b)
            a.pop("timestamp")
            b.pop("timestamp")
        assert a == b, name
    _synth(tmp_path, "c", seed="4", noise=0.3)
    assert (tmp_path / "c" / "obs_000.txt").read_text() != (tmp_path / "a" / "obs_000.txt").read_text()


def test_sweep_table_grid(tmp_path):
    config = {"case": {"variant": "two_domain", "resolution": 8, "cavity_cells": 2, "max_iter": 1},
              "grid": {"alpha": [1e-6, 1e-4], "beta": [1.0, 10.0], "gamma": [0.0, 0.01, 1.0], "k": [24, 48]}}
    code, out = run(tmp_path, "sweep", config)
    assert code == 0
    rows = read_rows(out / "results.csv")
    assert len(rows) == 24
    assert {r["k"] for r in rows} == {"24", "48"}
    assert json.loads((out / "manifest.json").read_text())["result"] == {"cells": 24, "failed": 0}


def test_sweep_bad_case(tmp_path, capsys):
    code, _ = run(tmp_path, "sweep", {"case": {"resolutoin": 8},
                                      "grid": {"alpha": [0.0], "beta": [1.0], "gamma": [0.0], "k": [4]}})
    assert code == 2 and "$.case" in capsys.readouterr().err


@pytest.fixture
def voxel_inputs(tmp_path):
    rng = np.random.default_rng(0)
    aff = np.diag([5.0, 5.0, 5.0, 1.0])
    shape = (9, 9, 9)
    write_voxels(VoxelGrid(rng.uniform(50, 100, shape), aff), tmp_path / "S0.vox")
    write_voxels(VoxelGrid(rng.uniform(100, 150, shape), aff), tmp_path / "St.vox")
    write_voxels(VoxelGrid(np.full(shape, 1200.0), aff), tmp_path / "T1.vox")
    csf = np.zeros(shape)
    csf[0] = csf[-1] = 1
    write_voxels(VoxelGrid(csf, aff), tmp_path / "csf.vox")
    for i, lam in enumerate([1.2e-3, 0.9e-3, 0.6e-3]):
        write_voxels(VoxelGrid(np.full(shape, lam), aff), tmp_path / f"l{i}.vox")
    write_voxels(VoxelGrid(np.ones(shape), aff), tmp_path / "all.vox")
    return tmp_path


def test_concentration_command(voxel_inputs):
    params = {"theta_deg": 8.0, "T_a": 900.0, "T_b": 5.1, "TR": 2000.0, "m": 200, "r1": 2.0}
    code, out = run(voxel_inputs, "concentration", {"baseline": "S0.vox", "timepoint": "St.vox", "t1_map": "T1.vox",
                                                    "params": params})
    assert code == 0
    c = read_voxels(out / "concentration.vox").values
    assert c.shape == (9, 9, 9) and np.all(c >= 0)
    params["m"] = 3
    code, _ = run(voxel_inputs, "concentration", {"baseline": "S0.vox", "timepoint": "St.vox", "t1_map": "T1.vox",
                                                  "params": params}, "bad")
    assert code == 2


def test_dti_command(voxel_inputs):
    code, out = run(voxel_inputs, "dti", {"eigenvalues": ["l0.vox", "l1.vox", "l2.vox"], "masks": {"all": "all.vox"}})
    assert code == 0
    (row,) = read_rows(out / "results.csv")
    assert float(row["md_median"]) == pytest.approx(0.9e-3)
    assert float(row["tortuosity"]) == pytest.approx(np.sqrt(3.0e-3 / 0.9e-3))


@pytest.mark.parametrize("mode", ["RAW", "GS", "CP"])
def test_preprocess_command(voxel_inputs, mode):
    cfg = {"signal": "St.vox", "mesh": {"phantom": {"resolution": 4, "variant": "three_domain"}}, "mode": mode}
    if mode == "CP":
        cfg["csf_mask"] = "csf.vox"
    code, out = run(voxel_inputs, "preprocess", cfg, f"pre_{mode}")
    assert code == 0
    assert (out / "boundary.txt").exists() and (out / "fields" / "boundary.vtk").exists()
