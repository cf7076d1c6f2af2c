import os
import uuid
from datetime import datetime, timezone
from typing import Optional, List, Dict, Any

from dotenv import load_dotenv
from sqlalchemy import String, Integer, DateTime, select
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column
from sqlalchemy.ext.asyncio import create_async_engine, async_sessionmaker, AsyncSession, AsyncEngine

load_dotenv()


def utcnow():
    return datetime.now(timezone.utc)


def _archive_path() -> str:
    return os.environ.get("CHAOS_RUN_ARCHIVE", "").strip()


class Base(DeclarativeBase):
    pass


class RunRecord(Base):
    __tablename__ = "runs"
    run_id: Mapped[str] = mapped_column(String(36), primary_key=True)
    command: Mapped[str] = mapped_column(String(32), nullable=False)
    spec_digest: Mapped[str] = mapped_column(String(64), nullable=False, index=True)
    payload_digest: Mapped[str] = mapped_column(String(64), nullable=False)
    # u64 seeds overflow sqlite's signed integers
    seed: Mapped[str] = mapped_column(String(20), nullable=False)
    exit_code: Mapped[int] = mapped_column(Integer, nullable=False)
    created_at: Mapped[datetime] = mapped_column(DateTime(timezone=True), nullable=False, default=utcnow)


engine: Optional[AsyncEngine] = None
AsyncSessionLocal: Optional[async_sessionmaker] = None


def configure(path: Optional[str] = None) -> bool:
    """Bind the archive to a sqlite file; returns False when archiving is disabled."""
    global engine, AsyncSessionLocal
    path = path or _archive_path()
    if not path:
        engine = None
        AsyncSessionLocal = None
        return False
    engine = create_async_engine(f"sqlite+aiosqlite:///{path}", echo=False, future=True)
    AsyncSessionLocal = async_sessionmaker(engine, expire_on_commit=False, class_=AsyncSession)
    return True


def _sessions() -> async_sessionmaker:
    if AsyncSessionLocal is None:
        raise RuntimeError("Run archive is not configured (set CHAOS_RUN_ARCHIVE or pass --archive)")
    return AsyncSessionLocal


async def init_db() -> None:
    if engine is None:
        raise RuntimeError("Run archive is not configured (set CHAOS_RUN_ARCHIVE or pass --archive)")
    async with engine.begin() as conn:
        await conn.run_sync(Base.metadata.create_all)


async def dispose() -> None:
    if engine is not None:
        await engine.dispose()


def _as_dict(r: RunRecord) -> Dict[str, Any]:
    return {
        "run_id": r.run_id,
        "command": r.command,
        "spec_digest": r.spec_digest,
        "payload_digest": r.payload_digest,
        "seed": int(r.seed),
        "exit_code": r.exit_code,
        "created_at": r.created_at.isoformat(),
    }


async def runs_for_spec(spec_digest: str) -> List[Dict[str, Any]]:
    async with _sessions()() as session:
        stmt = select(RunRecord).where(RunRecord.spec_digest == spec_digest).order_by(RunRecord.created_at)
        res = await session.execute(stmt)
        return [_as_dict(r) for r in res.scalars().all()]


async def latest_runs(limit: int = 20) -> List[Dict[str, Any]]:
    async with _sessions()() as session:
        stmt = select(RunRecord).order_by(RunRecord.created_at.desc()).limit(limit)
        res = await session.execute(stmt)
        return [_as_dict(r) for r in res.scalars().all()]


async def record_run(command: str, spec_digest: str, payload_digest: str, seed: int,
                     exit_code: int) -> Dict[str, Any]:
    """Store one run and compare its payload with earlier runs of the same spec.

    determinism is "new" for the first run of a spec, "match" when every
    earlier successful run produced the same payload, "mismatch" otherwise.
    """
    earlier = [r for r in await runs_for_spec(spec_digest) if r["exit_code"] == 0]
    previous = {r["payload_digest"] for r in earlier}
    if not earlier:
        determinism = "new"
    elif previous == {payload_digest}:
        determinism = "match"
    else:
        determinism = "mismatch"

    async with _sessions()() as session:
        obj = RunRecord(run_id=str(uuid.uuid4()), command=command, spec_digest=spec_digest,
                        payload_digest=payload_digest, seed=str(seed), exit_code=exit_code,
                        created_at=utcnow())
        session.add(obj)
        await session.commit()
    return {"ok": determinism != "mismatch", "run_id": obj.run_id, "determinism": determinism,
            "previous": sorted(previous)}
