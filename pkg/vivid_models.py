from sqlmodel import Field, SQLModel, Relationship
from typing import Optional, List
from datetime import datetime, timezone
from enums import RunStatus


class Run(SQLModel, table=True):
    """
    One harness invocation recorded in the run registry.

    Attributes:
        id (Optional[int]): The unique identifier of the run, automatically generated.
        kind (str): What ran: make-data, train, generate, calibrate, metrics or ablate.
        stage (Optional[str]): Training stage for train runs.
        status (str): running, completed or aborted.
        seed (int): Global seed of the run.
        config_hash (str): Content hash of the resolved config.
        run_dir (str): Directory holding the run's config, manifest and outputs.
        message (Optional[str]): Failure reason for aborted runs.
        started_at (datetime): When the run was registered.
        finished_at (Optional[datetime]): When the run completed or aborted.
        metrics (List["MetricRecord"]): Scalar metrics reported by the run.
    """
    id: Optional[int] = Field(default=None, primary_key=True)
    kind: str
    stage: Optional[str] = None
    status: str = Field(default=RunStatus.RUNNING.value)
    seed: int = Field(default=0)
    config_hash: str
    run_dir: str
    message: Optional[str] = None
    started_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    finished_at: Optional[datetime] = None
    metrics: List["MetricRecord"] = Relationship(back_populates="run")


class MetricRecord(SQLModel, table=True):
    """
    A named scalar produced by a run (loss, hkv, hmv, usage, ...).

    Attributes:
        id (Optional[int]): The unique identifier, automatically generated.
        run_id (int): The run that produced the value.
        name (str): Metric name.
        value (float): Metric value.
        variant (Optional[str]): Ablation variant the value belongs to.
    """
    id: Optional[int] = Field(default=None, primary_key=True)
    run_id: int = Field(foreign_key="run.id")
    name: str
    value: float
    variant: Optional[str] = None
    run: Optional[Run] = Relationship(back_populates="metrics")
