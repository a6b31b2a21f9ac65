import logging
from contextlib import contextmanager
from pathlib import Path

from sqlmodel import create_engine, Session, SQLModel

logger = logging.getLogger(__name__)

REGISTRY_FILE = "registry.db"


def registry_url(output_root: Path) -> str:
    """SQLite URL of the run registry inside an output root."""
    return f"sqlite:///{Path(output_root) / REGISTRY_FILE}"


class DatabaseManager:
    """
    Manages the run registry database.

    Provides methods to create the engine, create the registry tables, and manage sessions.

    Attributes:
        database_url (str): The database connection URL.
        engine: The SQLAlchemy engine for database connections.
    """
    def __init__(self, database_url: str, echo: bool = False):
        """
        Initializes the DatabaseManager with the provided database URL.

        Args:
            database_url (str): The database connection URL.
            echo (bool): Log every SQL statement.
        """
        self.database_url = database_url
        self.echo = echo
        self.engine = create_engine(self.database_url, echo=echo)

    def create_tables(self):
        """
        Creates all tables defined in the SQLModel metadata within the database.

        Raises:
            ValueError: If the engine has not been initialized before attempting to create tables.
        """
        if self.engine is None:
            raise ValueError("Engine is not initialized.")
        # Registers the tables on SQLModel.metadata.
        import vivid_models  # noqa: F401
        try:
            SQLModel.metadata.create_all(self.engine)
        except Exception as e:
            logger.error("Error creating registry tables: %s", e)
            raise

    @contextmanager
    def session(self):
        """
        Context manager for database sessions.

        Commits on success, rolls back on any exception, and always closes.

        Yields:
            Session: A session bound to the engine.
        """
        session = Session(bind=self.engine, expire_on_commit=False)
        try:
            yield session
            session.commit()
        except:
            session.rollback()
            raise
        finally:
            session.close()
