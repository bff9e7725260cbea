from sqlalchemy import Column, Integer, String, DateTime, LargeBinary, JSON
from sqlalchemy.orm import declarative_base
from datetime import datetime, timezone

Base = declarative_base()


def utc_now():
    return datetime.now(timezone.utc)


class SpectralTableCache(Base):
    __tablename__ = "spectral_tables"
    id = Column(Integer, primary_key=True, index=True)
    cache_key = Column(String(64), unique=True, nullable=False)
    version = Column(Integer, nullable=False)
    grid_spec = Column(JSON)
    payload = Column(LargeBinary, nullable=False)  # np.savez_compressed archive
    created_at = Column(DateTime, default=utc_now)


class KernelCache(Base):
    __tablename__ = "transference_kernels"
    id = Column(Integer, primary_key=True, index=True)
    cache_key = Column(String(64), unique=True, nullable=False)
    version = Column(Integer, nullable=False)
    spectral_key = Column(String(64), nullable=False)
    grid_spec = Column(JSON)
    payload = Column(LargeBinary, nullable=False)
    created_at = Column(DateTime, default=utc_now)


class RunRecord(Base):
    __tablename__ = "run_records"
    id = Column(Integer, primary_key=True, index=True)
    command = Column(String(32), nullable=False)
    config_hash = Column(String(64), nullable=False)
    status = Column(String(16), default="running")  # running/ok/failed
    metrics = Column(JSON)
    created_at = Column(DateTime, default=utc_now)
    finished_at = Column(DateTime)
