"""
Run history for ``manage`` invocations, kept in a SQL database.
"""
import logging
from datetime import timezone
from typing import Any, Dict, List, Optional

from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Integer, String, create_engine, text
from sqlalchemy.orm import Session, declarative_base, relationship, sessionmaker
from sqlalchemy.pool import StaticPool

from .config import get_ledger_config
from .pipeline import ManagementReport

logger = logging.getLogger(__name__)

Base = declarative_base()


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    target_repo = Column(String, nullable=False)
    version_label = Column(String, nullable=True)
    started_at = Column(DateTime, nullable=False)
    any_vulnerable = Column(Boolean, nullable=False)
    output_dir = Column(String, nullable=True)

    findings = relationship("RunFinding", back_populates="run", cascade="all, delete-orphan",
                            order_by="RunFinding.id")


class RunFinding(Base):
    __tablename__ = "run_findings"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    cve_id = Column(String, nullable=False, index=True)
    target_file = Column(String, nullable=False)
    target_function = Column(String, nullable=True)
    method = Column(String, nullable=False)
    similarity = Column(Float, nullable=False)
    status = Column(String, nullable=False)
    reason = Column(String, nullable=True)

    run = relationship("Run", back_populates="findings")


class RunLedger:
    def __init__(self, url: Optional[str] = None):
        settings = dict(get_ledger_config(url))
        db_url = settings.pop("url")
        if db_url.endswith(":memory:"):
            # in-memory databases live on a single connection
            settings["poolclass"] = StaticPool
        self.engine = create_engine(db_url, **settings)
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
        Base.metadata.create_all(bind=self.engine)

    def session(self) -> Session:
        return self.SessionLocal()

    def ping(self) -> bool:
        with self.session() as db:
            db.execute(text("SELECT 1"))
        return True

    def record_run(self, report: ManagementReport, output_dir: Optional[str] = None) -> int:
        with self.session() as db:
            try:
                run = Run(
                    target_repo=report.target_repo,
                    version_label=report.version_label,
                    started_at=report.generated_at.astimezone(timezone.utc).replace(tzinfo=None),
                    any_vulnerable=report.summary.any_vulnerable,
                    output_dir=output_dir,
                )
                for entry in report.findings:
                    f = entry.finding
                    run.findings.append(RunFinding(
                        cve_id=f.cve_id, target_file=f.target_file, target_function=f.target_function,
                        method=f.method.value, similarity=f.similarity, status=f.status.value, reason=f.reason,
                    ))
                db.add(run)
                db.commit()
                db.refresh(run)
                logger.info(f"Recorded run {run.id} for {report.target_repo} ({len(report.findings)} findings)")
                return run.id
            except Exception:
                db.rollback()
                raise

    def list_runs(self) -> List[Dict[str, Any]]:
        with self.session() as db:
            return [_run_to_dict(r, with_findings=False) for r in db.query(Run).order_by(Run.id).all()]

    def get_run(self, run_id: int) -> Optional[Dict[str, Any]]:
        with self.session() as db:
            run = db.query(Run).filter(Run.id == run_id).first()
            return _run_to_dict(run, with_findings=True) if run else None


def _run_to_dict(run: Run, with_findings: bool) -> Dict[str, Any]:
    data = {
        "id": run.id,
        "target_repo": run.target_repo,
        "version_label": run.version_label,
        "started_at": run.started_at.replace(tzinfo=timezone.utc).isoformat(),
        "any_vulnerable": run.any_vulnerable,
        "output_dir": run.output_dir,
        "finding_count": len(run.findings),
    }
    if with_findings:
        data["findings"] = [
            {"cve_id": f.cve_id, "target_file": f.target_file, "target_function": f.target_function,
             "method": f.method, "similarity": f.similarity, "status": f.status, "reason": f.reason}
            for f in run.findings
        ]
    return data
