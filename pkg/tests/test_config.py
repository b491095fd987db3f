"""Configuration parsing: defaults, overrides, rejection, echo round-trip."""
from __future__ import annotations

import numpy as np
import pytest

from rampopt.config import ConfigError, build_mesh, load_config, \
    render_config


def test_defaults_are_complete_without_a_file():
    cfg = load_config(None)
    assert cfg.problem.n_steps == 20
    assert cfg.problem.t_final == 1800.0
    assert cfg.material.E == 210e9
    assert cfg.material.h == 20.0
    assert cfg.guess == "heat-first"
    assert cfg.solver.method == "auto"
    assert cfg.sqp.f_tol == 1e-8
    assert cfg.lumped_mass is True
    assert cfg.mesh.source == "bundled"


def test_file_overrides_defaults(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(
        "[time]\nn_steps = 5\nt_final = 900\n"
        "[material]\nfilm_coefficient = 35\n"
        "[sqp]\nworkers = 3\ncentral = yes\n"
        "[output]\ndirectory = out/here\nvtk = off\n"
    )
    cfg = load_config(str(ini))
    assert cfg.problem.n_steps == 5
    assert cfg.problem.t_final == 900.0
    assert cfg.problem.dt == 180.0
    assert cfg.material.h == 35.0
    assert cfg.material.E == 210e9  # untouched default
    assert cfg.sqp.workers == 3
    assert cfg.sqp.central is True
    assert cfg.output_dir == "out/here"
    assert cfg.write_vtk is False


def test_missing_file_is_an_error():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/no/such/config.ini")


def test_unknown_section_rejected(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[physics]\ngravity = 9.81\n")
    with pytest.raises(ConfigError, match="physics"):
        load_config(str(ini))


def test_unknown_key_rejected(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[material]\nyoung_modulus = 1e9\n")  # typo must not pass
    with pytest.raises(ConfigError, match="young_modulus"):
        load_config(str(ini))


def test_bad_value_types_rejected(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[time]\nn_steps = twenty\n")
    with pytest.raises(ConfigError, match="n_steps"):
        load_config(str(ini))
    ini.write_text("[output]\nvtk = maybe\n")
    with pytest.raises(ConfigError, match="vtk"):
        load_config(str(ini))


def test_physical_contradictions_rejected(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[ocp]\nomega_rate_limit = 0.01\n")
    with pytest.raises(ConfigError, match="rate limit"):
        load_config(str(ini))
    ini.write_text("[ocp]\nguess = warp-drive\n")
    with pytest.raises(ConfigError, match="warp-drive"):
        load_config(str(ini))


def test_echo_round_trips(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(
        "[time]\nn_steps = 8\nt_final = 1600\n"
        "[ocp]\ntemp_terminal = 350\nsymmetric_rate = true\n"
        "[solver]\nmethod = cg\nlumped_mass = false\n"
    )
    cfg = load_config(str(ini))
    echo = tmp_path / "config.echo"
    echo.write_text(render_config(cfg))
    again = load_config(str(echo))
    assert again == cfg


def test_bundled_mesh_matches_generator_defaults():
    cfg = load_config(None)
    bundled = build_mesh(cfg.mesh)
    import dataclasses

    generated = build_mesh(dataclasses.replace(cfg.mesh, source="generate"))
    assert np.allclose(bundled.nodes, generated.nodes)
    assert np.array_equal(bundled.tets, generated.tets)
    assert np.array_equal(bundled.tri_tags, generated.tri_tags)


def test_box_generator_and_bad_inputs(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[mesh]\nsource = generate\nkind = box\n")
    mesh = build_mesh(load_config(str(ini)).mesh)
    assert len(mesh.nodes) == 8
    assert len(mesh.tets) == 6

    ini.write_text("[mesh]\nsource = generate\nkind = dodecahedron\n")
    with pytest.raises(ConfigError, match="dodecahedron"):
        build_mesh(load_config(str(ini)).mesh)

    ini.write_text("[mesh]\nsource = generate\nresolution = 3,x,2\n")
    with pytest.raises(ConfigError, match="resolution"):
        build_mesh(load_config(str(ini)).mesh)


def test_gas_washed_end_retag_is_configurable(tmp_path):
    from rampopt.mesh import PatchLabel

    ini = tmp_path / "run.ini"
    base = ("[mesh]\nsource = generate\nresolution = 3,5,3\nblade = false\n")
    ini.write_text(base)
    washed = build_mesh(load_config(str(ini)).mesh)
    ini.write_text(base + "gas_washed_end = false\n")
    dry = build_mesh(load_config(str(ini)).mesh)
    n_washed = len(washed.tris_with_label(PatchLabel.ROBIN))
    n_dry = len(dry.tris_with_label(PatchLabel.ROBIN))
    assert n_washed > n_dry  # one end cap became convective

    # One-sided washing: only triangles on the z = z_len cheek were retagged.
    def robin_tris(mesh):
        tris = mesh.boundary_tris[mesh.tris_with_label(PatchLabel.ROBIN)]
        return {tuple(sorted(t)) for t in tris.tolist()}

    gained = robin_tris(washed) - robin_tris(dry)
    assert gained
    z_len = washed.nodes[:, 2].max()
    for tri in gained:
        assert np.allclose(washed.nodes[list(tri), 2], z_len)
