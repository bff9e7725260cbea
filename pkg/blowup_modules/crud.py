import io
import logging

import numpy as np
from sqlalchemy.orm import Session

from blowup_modules import models
from blowup_modules.database import CACHE_VERSION

logger = logging.getLogger(__name__)


def pack_arrays(arrays: dict) -> bytes:
    buffer = io.BytesIO()
    np.savez_compressed(buffer, **arrays)
    return buffer.getvalue()


def unpack_arrays(payload: bytes) -> dict:
    with np.load(io.BytesIO(payload), allow_pickle=False) as archive:
        return {name: archive[name] for name in archive.files}


def _fresh_or_drop(db: Session, row):
    if row is None:
        return None
    if row.version != CACHE_VERSION:
        logger.warning(
            f"Cache entry {row.cache_key[:12]} has version {row.version}, expected {CACHE_VERSION}; rebuilding"
        )
        db.delete(row)
        db.commit()
        return None
    return row


# Spectral tables
def get_spectral_tables(db: Session, cache_key: str):
    row = db.query(models.SpectralTableCache).filter(models.SpectralTableCache.cache_key == cache_key).first()
    row = _fresh_or_drop(db, row)
    if row is None:
        return None
    return unpack_arrays(row.payload)


def save_spectral_tables(db: Session, cache_key: str, grid_spec: dict, arrays: dict):
    db.query(models.SpectralTableCache).filter(models.SpectralTableCache.cache_key == cache_key).delete()
    db_entry = models.SpectralTableCache(
        cache_key=cache_key,
        version=CACHE_VERSION,
        grid_spec=grid_spec,
        payload=pack_arrays(arrays),
    )
    db.add(db_entry)
    db.commit()
    db.refresh(db_entry)
    return db_entry


# Transference kernels
def get_kernel(db: Session, cache_key: str):
    row = db.query(models.KernelCache).filter(models.KernelCache.cache_key == cache_key).first()
    row = _fresh_or_drop(db, row)
    if row is None:
        return None
    return unpack_arrays(row.payload)


def save_kernel(db: Session, cache_key: str, spectral_key: str, grid_spec: dict, arrays: dict):
    db.query(models.KernelCache).filter(models.KernelCache.cache_key == cache_key).delete()
    db_entry = models.KernelCache(
        cache_key=cache_key,
        version=CACHE_VERSION,
        spectral_key=spectral_key,
        grid_spec=grid_spec,
        payload=pack_arrays(arrays),
    )
    db.add(db_entry)
    db.commit()
    db.refresh(db_entry)
    return db_entry


def list_cache_entries(db: Session):
    return {
        "spectral": db.query(models.SpectralTableCache).all(),
        "kernel": db.query(models.KernelCache).all(),
    }


# Run records
def create_run_record(db: Session, command: str, config_hash: str):
    db_run = models.RunRecord(command=command, config_hash=config_hash, status="running")
    db.add(db_run)
    db.commit()
    db.refresh(db_run)
    return db_run


def finish_run_record(db: Session, run_id: int, status: str, metrics: dict | None = None):
    db_run = db.query(models.RunRecord).filter(models.RunRecord.id == run_id).first()
    if not db_run:
        raise ValueError("Run record not found")
    db_run.status = status
    db_run.metrics = metrics
    db_run.finished_at = models.utc_now()
    db.commit()
    db.refresh(db_run)
    return db_run


def list_run_records(db: Session, command: str | None = None):
    query = db.query(models.RunRecord)
    if command:
        query = query.filter(models.RunRecord.command == command)
    return query.order_by(models.RunRecord.id).all()
