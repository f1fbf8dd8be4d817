from .checkpoint import Checkpoint, CheckpointError
from .config import AdapterSpec, ConfigError, RunConfig, TaskSpec, load_config
from .runner import RunResult, Trainer, read_events, resume, run
from .task import make_teacher_student_task

__all__ = [
    "AdapterSpec",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "RunConfig",
    "RunResult",
    "TaskSpec",
    "Trainer",
    "load_config",
    "make_teacher_student_task",
    "read_events",
    "resume",
    "run",
]
