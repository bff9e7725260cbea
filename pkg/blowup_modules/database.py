from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import QueuePool
from dotenv import load_dotenv
from pathlib import Path
import os

load_dotenv()

CACHE_DIR = Path(os.getenv("BLOWUP_CACHE_DIR", ".blowup_cache"))
DATABASE_URL = os.getenv("BLOWUP_DATABASE_URL", f"sqlite:///{CACHE_DIR / 'blowup_cache.db'}")
LOG_LEVEL = os.getenv("BLOWUP_LOG_LEVEL", "INFO")

# Bump when a cached payload layout changes; stale rows are rebuilt
CACHE_VERSION = 4


def make_engine(url: str = DATABASE_URL):
    if url.startswith("sqlite:///"):
        Path(url[len("sqlite:///"):]).parent.mkdir(parents=True, exist_ok=True)
        # sqlite only allows one writer; keep a small pool
        return create_engine(url, poolclass=QueuePool, pool_size=1, max_overflow=2, pool_pre_ping=True)
    return create_engine(
        url,
        poolclass=QueuePool,
        pool_size=5,
        max_overflow=10,
        pool_timeout=30,
        pool_pre_ping=True,
    )


engine = None
SessionLocal = sessionmaker(autocommit=False, autoflush=False)


def init_db(url: str = DATABASE_URL):
    """Bind SessionLocal to url and create missing tables."""
    from blowup_modules.models import Base

    global engine
    engine = make_engine(url)
    SessionLocal.configure(bind=engine)
    Base.metadata.create_all(bind=engine)
    return engine
