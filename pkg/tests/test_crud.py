import numpy as np
import pytest
from numpy.testing import assert_array_equal
from pydantic import ValidationError

from blowup_modules import crud, models
from blowup_modules.database import CACHE_VERSION
from blowup_modules.schemas import LogGridSpec, Params, RunRecordResponse


def _arrays():
    return {"xi_grid": np.geomspace(1e-2, 1e2, 5), "a_values": np.arange(5) * (1 + 1j)}


def test_spectral_tables_round_trip(db):
    crud.save_spectral_tables(db, "k1", {"n": 5}, _arrays())
    loaded = crud.get_spectral_tables(db, "k1")
    assert_array_equal(loaded["a_values"], _arrays()["a_values"])
    assert crud.get_spectral_tables(db, "missing") is None


def test_saving_twice_replaces_the_entry(db):
    crud.save_spectral_tables(db, "k1", {}, _arrays())
    crud.save_spectral_tables(db, "k1", {}, {"xi_grid": np.ones(2)})
    assert len(crud.list_cache_entries(db)["spectral"]) == 1
    assert_array_equal(crud.get_spectral_tables(db, "k1")["xi_grid"], np.ones(2))


def test_stale_entries_are_dropped(db):
    row = crud.save_kernel(db, "kk", "k1", {}, {"F_table": np.eye(3)})
    row.version = CACHE_VERSION - 1
    db.commit()
    assert crud.get_kernel(db, "kk") is None
    assert db.query(models.KernelCache).count() == 0


def test_run_records(db):
    first = crud.create_run_record(db, "solve", "abc")
    crud.create_run_record(db, "verify", "abc")
    assert first.status == "running"
    done = crud.finish_run_record(db, first.id, "ok", {"iterations": 3})
    assert done.finished_at is not None
    response = RunRecordResponse.model_validate(done)
    assert response.metrics == {"iterations": 3}
    assert [r.command for r in crud.list_run_records(db, "solve")] == ["solve"]
    assert len(crud.list_run_records(db)) == 2
    with pytest.raises(ValueError):
        crud.finish_run_record(db, 999, "ok")


def test_params_invariants():
    with pytest.raises(ValidationError):
        Params(alpha=0.6)
    with pytest.raises(ValidationError):
        Params(k=1, bigN=4)
    with pytest.raises(ValidationError):
        Params(t0=0.9)
    with pytest.raises(ValidationError):
        LogGridSpec(min=2.0, max=1.0, n=10)


def test_config_hash_tracks_parameters():
    assert Params().config_hash() == Params().config_hash()
    assert Params().config_hash() != Params(alpha=0.3).config_hash()
