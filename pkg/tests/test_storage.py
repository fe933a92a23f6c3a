import numpy as np
import pytest

from ahcf.lattice import Lattice
from ahcf.perturb import generate_perturbation
from ahcf.storage import (
    ExperimentConfig,
    StorageError,
    dumps_csv,
    load_config,
    make_config,
    parse_overrides,
    read_checkpoint,
    write_checkpoint,
    write_manifest,
)
from ahcf.structure import standard_structure


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    lat = Lattice(2, 6)
    ref = standard_structure(lat)
    s = generate_perturbation(ref, 1e-2, seed=5)
    path = tmp_path / "run.ckpt"
    write_checkpoint(path, [0.0, 0.1], [ref, s], [{"t": 0.0}, {"t": 0.1}])
    times, states, header = read_checkpoint(path)
    assert times == [0.0, 0.1]
    for a, b in zip(states[1].arrays(), s.arrays()):
        assert a.tobytes() == b.tobytes()
    assert states[1].volume == s.volume
    assert header["records"][1]["t"] == 0.1


def test_checkpoint_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(StorageError):
        read_checkpoint(p)
    with pytest.raises(StorageError):
        write_checkpoint(p, [0.0], [])


def test_csv_is_deterministic_and_blank_for_missing():
    recs = [{"t": 0.0, "rho_l2": 1.5, "psi_l2": float("nan")}]
    text = dumps_csv(recs, 1)
    assert text == dumps_csv(recs, 1)
    assert text.splitlines() == ["t,rho_l2,psi_l2,psi_c0,psi_c1,gauge,pi0_ratio", "0.0,1.5,,,,,"]


def test_overrides_parsing():
    assert parse_overrides("amplitude=0.02,mode_band=1,3,seed=4") == {
        "amplitude": "0.02",
        "mode_band": "1,3",
        "seed": "4",
    }
    with pytest.raises(StorageError):
        parse_overrides("oops")


def test_config_file_and_precedence(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("n = 2\npoints_per_axis = 8  # grid\nside_length = 2pi\namplitude = 0.01\n")
    cfg = load_config(p, {"amplitude": "0.005"})
    assert cfg.n == 2 and cfg.points_per_axis == 8
    assert cfg.side_length == pytest.approx(2 * np.pi)
    assert cfg.amplitude == 0.005
    assert cfg.lattice().dim == 4


def test_unknown_config_keys_rejected():
    with pytest.raises(StorageError):
        make_config({"amplitud": 0.1})
    assert make_config({}) == ExperimentConfig()


def test_manifest_hashes(tmp_path):
    (tmp_path / "a.txt").write_text("x")
    path = write_manifest(tmp_path, {"seed": 0}, ["a.txt"])
    assert "2d711642b726b04401627ca9fbac32f5c8530fb1903cc4db02258717921a4881" in path.read_text()
