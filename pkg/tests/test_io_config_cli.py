import csv
import re

import numpy as np
import pytest

from contact_equilibrate import io
from contact_equilibrate.cli import main
from contact_equilibrate.config import ConfigError, load_config, parse_config, shipped_config
from contact_equilibrate.mesh import Tag, build_rect_mesh, refine

SHIPPED = shipped_config()
ERROR_LINE = re.compile(r'^error module=(\w+) key=(\S+) message="(.*)"$')


def small_mesh():
    rule = lambda a, b: Tag.DIRICHLET if a[0] == b[0] == 0 else (Tag.CONTACT if a[1] == b[1] == 0 else Tag.NEUMANN)
    return refine(build_rect_mesh(3, 2, (0.0, 1.5, 0.0, 1.0), rule), [1, 4])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ------------------------------------------------------------------ io
def test_mesh_round_trip(tmp_path):
    mesh = small_mesh()
    path = tmp_path / "m.txt"
    io.write_mesh(path, mesh)
    back = io.read_mesh(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    for a, b in zip(back.boundary_records(), mesh.boundary_records()):
        np.testing.assert_array_equal(a, b)
    first = path.read_text().splitlines()[0]
    assert first == f"vertices {mesh.n_vertices} triangles {mesh.n_cells} boundary {len(mesh.boundary_faces)}"


@pytest.mark.parametrize("text", ["", "vertices 1 triangles 0\n0 0\n", "vertices 2 triangles 0 boundary 0\n0 0\n"])
def test_malformed_mesh_files(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(ValueError):
        io.read_mesh(path)


def test_vtk_structure(tmp_path):
    mesh = small_mesh()
    path = tmp_path / "f.vtk"
    disp = np.arange(2 * mesh.n_vertices, dtype=float).reshape(-1, 2) / 7
    io.write_vtk(path, mesh, {"displacement": disp}, {"eta": np.linspace(0, 1, mesh.n_cells)})
    lines = path.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0" and lines[2] == "ASCII"
    assert lines[3] == "DATASET UNSTRUCTURED_GRID"
    assert f"POINTS {mesh.n_vertices} double" in lines
    assert f"CELLS {mesh.n_cells} {4 * mesh.n_cells}" in lines
    i = lines.index(f"CELL_TYPES {mesh.n_cells}")
    assert set(lines[i + 1:i + 1 + mesh.n_cells]) == {"5"}
    j = lines.index("VECTORS displacement double")
    vec = np.array([[float(v) for v in ln.split()] for ln in lines[j + 1:j + 1 + mesh.n_vertices]])
    np.testing.assert_array_equal(vec[:, :2], disp)
    assert not vec[:, 2].any()
    assert f"CELL_DATA {mesh.n_cells}" in lines


def test_table_keeps_full_precision(tmp_path):
    vals = [0.1, 1 / 3, np.pi * 1e-20, 2.0**-1074, -1e300]
    path = tmp_path / "t.csv"
    io.write_table(path, [{"i": k, "v": v, "flag": v > 0} for k, v in enumerate(vals)])
    rows = read_csv(path)
    assert rows[0] == ["i", "v", "flag"]
    assert [float(r[1]) for r in rows[1:]] == vals
    assert [r[2] for r in rows[1:]] == ["1", "1", "1", "1", "0"]


# --------------------------------------------------------------- config
def test_shipped_config_values():
    cfg = load_config(SHIPPED, env={})
    assert cfg["material.young"] == 1.0 and cfg["material.poisson"] == 0.3
    assert cfg["nitsche.gamma0"] == 100.0 and cfg["nitsche.delta_init"] == 1.0
    a = cfg.adaptive_config()
    assert (a.gamma_reg, a.gamma_lin, a.fraction) == (0.04, 0.08, 0.06)
    assert cfg.mode == "adaptive" and a.max_steps == 11
    pb = cfg.problem()
    assert pb.mesh.n_cells == 16 and pb.degree == 1


def test_empty_config_lists_required_keys():
    with pytest.raises(ConfigError) as err:
        parse_config("")
    for key in ("geometry.rect", "material.young", "material.poisson", "nitsche.gamma0", "nitsche.delta_init"):
        assert key in str(err.value)
    assert err.value.key == "geometry.rect"


def with_setting(key, value):
    """Shipped config text with ``key`` set to ``value`` (replaced or appended)."""
    lines = [ln for ln in SHIPPED.read_text().splitlines() if not ln.startswith(key + " ")]
    return "\n".join(lines + [f"{key} = {value}"])


@pytest.mark.parametrize("key, value", [
    ("material.poisson", "0.5"),
    ("material.young", "-1"),
    ("adaptive.fraction", "0"),
    ("adaptive.gamma_reg", "1.5"),
    ("nitsche.degree", "3"),
    ("adaptive.stopping", "sometimes"),
    ("geometry.nx", "four"),
    ("geometry.colour", "red"),
    ("verify.uniform_steps", "2"),
])
def test_rejected_values_name_their_key(key, value):
    with pytest.raises(ConfigError) as err:
        parse_config(with_setting(key, value))
    assert err.value.key == key


def test_repeated_and_malformed_lines():
    with pytest.raises(ConfigError) as err:
        parse_config(SHIPPED.read_text() + "\nmaterial.young = 2\n")
    assert err.value.key == "material.young"
    with pytest.raises(ConfigError):
        parse_config(SHIPPED.read_text() + "\njust some words\n")


def test_environment_overrides():
    text = SHIPPED.read_text()
    cfg = parse_config(text, {"CE_ADAPTIVE_FRACTION": "0.1", "CE_NITSCHE_GAMMA0": "50", "HOME": "/root"})
    assert cfg["adaptive.fraction"] == 0.1 and cfg["nitsche.gamma0"] == 50.0
    with pytest.raises(ConfigError) as err:
        parse_config(text, {"CE_ADAPTIVE_SPEED": "3"})
    assert err.value.key == "adaptive.speed"
    with pytest.raises(ConfigError):
        parse_config(text, {"CE_MATERIAL_POISSON": "0.5"})


def test_mesh_file_geometry(tmp_path):
    mesh = small_mesh()
    io.write_mesh(tmp_path / "body.txt", mesh)
    text = "\n".join(["geometry.mesh = body.txt", "material.young = 2", "material.poisson = 0.25",
                      "nitsche.gamma0 = 200", "nitsche.delta_init = 2"])
    (tmp_path / "run.cfg").write_text(text)
    pb = load_config(tmp_path / "run.cfg", env={}).problem(tmp_path)
    np.testing.assert_array_equal(pb.mesh.vertices, mesh.vertices)
    assert pb.young == 2.0


# ------------------------------------------------------------------ cli
def zero_load_config(tmp_path):
    text = SHIPPED.read_text()
    text = text.replace("load.body_force = 0 -0.01", "load.body_force = 0 0")
    text = text.replace("load.traction = 1 0 1 1 : -0.0275 0", "")
    path = tmp_path / "zero.cfg"
    path.write_text(text)
    return path


def test_single_solve_on_zero_loads(tmp_path):
    out = tmp_path / "out"
    assert main(["single-solve", "--config", str(zero_load_config(tmp_path)), "--out", str(out), "-q"]) == 0
    rows = read_csv(out / "estimators_step00.csv")
    etas = np.array([[float(v) for v in r[4:]] for r in rows[1:]])
    assert np.abs(etas).max() < 1e-9
    assert (out / "mesh_step00.txt").exists() and (out / "solution_step00.vtk").exists()
    assert len(read_csv(out / "runlog.csv")) == 2


def test_adaptive_artifacts(tmp_path):
    out = tmp_path / "out"
    assert main(["adaptive", "--config", str(SHIPPED), "--out", str(out), "-q"]) == 0
    # the initial mesh plus one table per refinement step
    names = sorted(p.name for p in out.glob("estimators_step*.csv"))
    assert names == [f"estimators_step{k:02d}.csv" for k in range(12)]
    log = read_csv(out / "runlog.csv")
    assert len(log) == 13 and log[0][:2] == ["step", "n_cells"]
    assert [int(r[1]) for r in log[1:]][:3] == [16, 21, 30]


def test_runs_are_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["adaptive", "--config", str(SHIPPED), "--out", str(out), "--budget", "3", "-q"]) == 0
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir())
    assert files == sorted(p.name for p in outs[1].iterdir())
    for name in files:
        if name.endswith(".csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_thread_count_keeps_tables(tmp_path):
    for name, threads in (("one", "1"), ("four", "4")):
        assert main(["adaptive", "--config", str(SHIPPED), "--out", str(tmp_path / name), "--budget", "2",
                     "--threads", threads, "-q"]) == 0
    for p in (tmp_path / "one").glob("*.csv"):
        assert p.read_bytes() == (tmp_path / "four" / p.name).read_bytes()


def test_config_errors_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(SHIPPED.read_text().replace("material.poisson = 0.3", "material.poisson = 0.5"))
    assert main(["adaptive", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    line = capsys.readouterr().err.strip().splitlines()[-1]
    m = ERROR_LINE.match(line)
    assert m and m.group(1) == "config" and m.group(2) == "material.poisson"
    assert main(["adaptive", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert ERROR_LINE.match(capsys.readouterr().err.strip().splitlines()[-1])
    assert main(["adaptive", "--config", str(SHIPPED), "--threads", "0"]) == 2


def test_runtime_errors_exit_one(tmp_path, capsys):
    cfg = tmp_path / "broken.cfg"
    cfg.write_text(SHIPPED.read_text() + "\ngeometry.mesh = nowhere.txt\n")
    assert main(["single-solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    m = ERROR_LINE.match(capsys.readouterr().err.strip().splitlines()[-1])
    assert m and m.group(1) == "io"


def test_uniform_study_budget(tmp_path):
    out = tmp_path / "u"
    assert main(["uniform-study", "--config", str(SHIPPED), "--out", str(out), "--budget", "3", "-q"]) == 0
    assert [int(r[1]) for r in read_csv(out / "runlog.csv")[1:]] == [16, 64, 256, 1024]
    # two steps cannot carry a rate fit
    assert main(["uniform-study", "--config", str(SHIPPED), "--out", str(out), "--budget", "2", "-q"]) == 2


def test_verify_writes_diagnostics(tmp_path, monkeypatch):
    # a coarse reference keeps this fast; the full-size run is in the acceptance suite
    monkeypatch.setenv("CE_VERIFY_REFERENCE_LEVELS", "3")
    monkeypatch.setenv("CE_VERIFY_LIFTING", "degree")
    out = tmp_path / "v"
    assert main(["verify", "--config", str(SHIPPED), "--out", str(out), "--budget", "3", "-q"]) == 0
    rows = read_csv(out / "diagnostics.csv")
    assert rows[0] == ["strategy", "step", "ndofs", "n_cells", "h1_error", "energy_error", "L", "U", "eta_tot",
                       "i_eff_low", "i_eff_up", "lifted", "bound", "bound_ok"]
    assert [r[0] for r in rows[1:]] == ["adaptive"] * 4 + ["uniform"] * 4
    assert all(r[-1] == "1" for r in rows[1:])
    summary = {r[0]: float(r[1]) for r in read_csv(out / "verify_summary.csv")[1:]}
    assert summary["reference_cells"] == 16 * 4**3
    assert (out / "runlog_adaptive.csv").exists() and (out / "estimators_uniform_step03.csv").exists()
