from contextlib import contextmanager
from datetime import datetime, timezone
from typing import Dict, Generic, List, Optional, Type, TypeVar

from sqlmodel import SQLModel, Session, select

from database_manager import DatabaseManager
from enums import RunStatus
from vivid_models import MetricRecord, Run

T = TypeVar('T', bound=SQLModel)


class BaseRepository(Generic[T]):
    """
    A base repository class that implements generic CRUD operations for any SQLModel entity.

    Attributes:
        db_manager (DatabaseManager): The database manager instance for database operations.
        model_class (Type[T]): The SQLModel class of the repository entity.
    """

    def __init__(
        self,
        db_manager: DatabaseManager,
        model_class: Type[T],
        session: Session = None
    ):
        """
        Initializes the base repository with a database manager
        and model class.

        Args:
            db_manager (DatabaseManager): The database manager to use.
            model_class (Type[T]): The model class of the entity.
            session (Session): Optional session for transactional operations.
        """
        self.db_manager = db_manager
        self.model_class = model_class
        self._session = session

    def _get_session(self):
        """
        Returns a session context manager.

        An explicit session passed at construction is yielded as-is (the
        caller commits); otherwise the database manager's auto-commit
        session is used.
        """
        if self._session is not None:
            @contextmanager
            def provided_session():
                yield self._session
            return provided_session()
        return self.db_manager.session()

    def add(self, obj_data: dict) -> T:
        """
        Adds a new entity to the database.

        Args:
            obj_data (dict): The data for the entity to add.

        Returns:
            T: The added entity with id set.
        """
        with self._get_session() as session:
            obj = self.model_class(**obj_data)
            session.add(obj)
            session.commit()
            session.refresh(obj)
            result_data = {
                c.name: getattr(obj, c.name)
                for c in obj.__table__.columns
            }
        return self.model_class(**result_data)

    def get(self, obj_id: int) -> Optional[T]:
        with self._get_session() as session:
            return session.get(self.model_class, obj_id)

    def update(self, obj_id: int, obj_data: dict) -> T:
        """
        Updates an entity with the provided data.

        Raises:
            ValueError: If no entity has the given id.
        """
        with self._get_session() as session:
            obj = session.get(self.model_class, obj_id)
            if obj is None:
                raise ValueError(
                    f"{self.model_class.__name__} with id {obj_id} not found"
                )
            for key, value in obj_data.items():
                setattr(obj, key, value)
            session.add(obj)
            session.commit()
            session.refresh(obj)
            return obj


class RunRepository(BaseRepository[Run]):
    '''
    Repository for Run entities.

    List of operations:

    start_run(kind, run_dir, config_hash, seed, stage) -> Run
    finish_run(run_id, status, message) -> Run
    get_recent(limit, kind) -> List[Run]
    '''

    def __init__(self, db_manager: DatabaseManager, session: Session = None):
        super().__init__(db_manager, Run, session)

    def start_run(self, kind: str, run_dir: str, config_hash: str, seed: int = 0,
                  stage: Optional[str] = None) -> Run:
        return self.add({
            "kind": kind,
            "stage": stage,
            "run_dir": run_dir,
            "config_hash": config_hash,
            "seed": seed,
            "status": RunStatus.RUNNING.value,
        })

    def finish_run(self, run_id: int, status: RunStatus, message: Optional[str] = None) -> Run:
        """
        Mark a run completed or aborted.

        Raises:
            ValueError: If the run does not exist or is already finished.
        """
        run = self.get(run_id)
        if run is None:
            raise ValueError(f"Run with id {run_id} not found")
        if run.status != RunStatus.RUNNING.value:
            raise ValueError(f"Run {run_id} is already {run.status}")
        return self.update(run_id, {
            "status": RunStatus(status).value,
            "message": message,
            "finished_at": datetime.now(timezone.utc),
        })

    def get_recent(self, limit: int = 20, kind: Optional[str] = None) -> List[Run]:
        with self._get_session() as session:
            statement = select(Run)
            if kind is not None:
                statement = statement.where(Run.kind == kind)
            statement = statement.order_by(Run.id.desc()).limit(limit)
            return list(session.exec(statement).all())


class MetricRepository(BaseRepository[MetricRecord]):
    '''
    Repository for MetricRecord entities.

    List of operations:

    record(run_id, metrics, variant) -> List[MetricRecord]
    for_run(run_id) -> List[MetricRecord]
    '''

    def __init__(self, db_manager: DatabaseManager, session: Session = None):
        super().__init__(db_manager, MetricRecord, session)

    def record(self, run_id: int, metrics: Dict[str, float], variant: Optional[str] = None) -> List[MetricRecord]:
        """
        Store several metrics for one run.

        Raises:
            ValueError: If the run does not exist.
        """
        with self._get_session() as session:
            if session.get(Run, run_id) is None:
                raise ValueError(f"Run with id {run_id} not found")
        return [
            self.add({"run_id": run_id, "name": name, "value": float(value), "variant": variant})
            for name, value in sorted(metrics.items())
        ]

    def for_run(self, run_id: int) -> List[MetricRecord]:
        with self._get_session() as session:
            statement = select(MetricRecord).where(MetricRecord.run_id == run_id).order_by(MetricRecord.id)
            return list(session.exec(statement).all())
