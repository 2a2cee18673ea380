import pytest

from services.errors import OutOfRange
from services.sp_core import SphericalGrid
from tools.settings import (
    Settings,
    config_hash,
    load_manifest,
    read_config_file,
    resolve_resolution,
    resolve_settings,
    settings_from_arguments,
)


def test_resolve_resolution():
    assert resolve_resolution("64") == SphericalGrid(64, 128)
    assert resolve_resolution("low") == SphericalGrid(64, 128)
    assert resolve_resolution("FULL") == SphericalGrid(256, 512)
    assert resolve_resolution(" 32x64 ") == SphericalGrid(32, 64)
    for bad in ("", "abc", "32x", "1x2"):
        with pytest.raises(ValueError):
            resolve_resolution(bad)


def test_defaults():
    settings = resolve_settings()
    assert settings.resolution == SphericalGrid(256, 512)
    assert settings.layers == 4
    assert settings.voxels == 64
    assert settings.quality.mu == 0.8
    assert settings.rotations == "octahedral"
    assert len(settings.rotation_set()) == 24


def test_config_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("# sweep config\nresolution = 32x64\nlayer_counts = 1, 2\nmu = 0.5  # edge weight\n\n")
    assert read_config_file(path) == {"resolution": "32x64", "layer_counts": "1, 2", "mu": "0.5"}
    settings = resolve_settings(config_path=path)
    assert settings.resolution == SphericalGrid(32, 64)
    assert settings.layer_counts == (1, 2)
    assert settings.quality.mu == 0.5


def test_config_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_config_file(tmp_path / "missing.conf")
    unknown = tmp_path / "unknown.conf"
    unknown.write_text("colour = blue\n")
    with pytest.raises(ValueError, match="unknown key"):
        read_config_file(unknown)
    malformed = tmp_path / "malformed.conf"
    malformed.write_text("layers 4\n")
    with pytest.raises(ValueError, match="key = value"):
        read_config_file(malformed)


def test_cli_overrides_config_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("layers = 2\nseed = 5\n")
    settings = settings_from_arguments({"config": str(path), "layers": 3, "seed": None})
    assert settings.layers == 3
    assert settings.seed == 5


def test_settings_validation():
    with pytest.raises(OutOfRange):
        Settings(layers=0)
    with pytest.raises(OutOfRange):
        Settings(workers=0)
    with pytest.raises(OutOfRange):
        Settings(resolutions=(SphericalGrid(32, 32),))
    Settings(resolutions=(SphericalGrid(32, 32),), representations=("nested",))
    with pytest.raises(OutOfRange):
        resolve_settings({"mu": "1.5"})
    with pytest.raises(ValueError):
        resolve_settings({"representation": "octree"})


def test_as_dict_leaves_out_machine_keys():
    payload = resolve_settings({"resolution": "32x64", "workers": 4}).as_dict()
    assert payload["resolution"] == "32x64"
    assert payload["resolutions"] == ["32x64", "64x128", "128x256", "256x512"]
    assert payload["quality"]["mu"] == 0.8
    for key in ("workers", "cache", "cache_dir"):
        assert key not in payload


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_desk_manifest():
    entries = load_manifest("desk")
    assert len(entries) == 11
    assert [e.mesh_id for e in entries] == sorted(e.mesh_id for e in entries)
    assert all(e.source == "fixture:" + e.mesh_id for e in entries)
    dome = next(e for e in entries if e.mesh_id == "hemisphere_dome")
    assert not dome.watertight


def test_csv_manifest(tmp_path):
    folder = tmp_path / "corpus"
    folder.mkdir()
    manifest = folder / "list.csv"
    manifest.write_text("mesh_id,path,watertight\n# skipped\nchair,meshes/chair.obj,false\nball,fixture:sphere,true\n")
    entries = load_manifest(str(manifest))
    assert [e.mesh_id for e in entries] == ["chair", "ball"]
    assert entries[0].source == str(folder / "meshes" / "chair.obj")
    assert not entries[0].watertight
    assert entries[1].source == "fixture:sphere"


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(str(tmp_path / "none.csv"))
    dup = tmp_path / "dup.csv"
    dup.write_text("mesh_id,path\na,fixture:sphere\na,fixture:cube\n")
    with pytest.raises(ValueError, match="duplicate"):
        load_manifest(str(dup))
    empty = tmp_path / "empty.csv"
    empty.write_text("mesh_id,path\n")
    with pytest.raises(ValueError, match="empty"):
        load_manifest(str(empty))
    no_path = tmp_path / "nopath.csv"
    no_path.write_text("mesh_id\nsolo\n")
    with pytest.raises(ValueError, match="missing column"):
        load_manifest(str(no_path))
