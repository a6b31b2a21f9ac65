import enum


class TrainingStage(enum.Enum):
    CODEBOOK = "codebook"
    STAGE1 = "stage1"
    STAGE2 = "stage2"


class HandSide(enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class Region(enum.Enum):
    HEAD = "head"
    HAND = "hand"


class ScheduleKind(enum.Enum):
    LINEAR = "linear"


class CodebookMode(enum.Enum):
    OFFLINE = "offline"
    ONLINE = "online"


class RunStatus(enum.Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    ABORTED = "aborted"
