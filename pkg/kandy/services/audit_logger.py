import json
from pathlib import Path
from typing import Optional

from kandy.config import settings

LEVELS = {"DEBUG": 10, "INFO": 20, "WARN": 30, "ERROR": 40}


class AuditLogger:
    """
    Records run events (stage transitions, grid updates, divergence, fits).
    Console echo uses the `[LEVEL] event` style; when a run directory is
    attached, events are also appended to events.jsonl there.
    """
    def __init__(self, component: str, sink: Optional[Path] = None):
        self.component = component
        self.sink = sink
        self.seq = 0

    def attach(self, run_dir: Path):
        self.sink = Path(run_dir) / "events.jsonl"
        self.seq = 0

    def detach(self):
        self.sink = None

    def log(self, event: str, level: str = "INFO", details: dict = None):
        if LEVELS.get(level, 20) < LEVELS.get(settings.LOG_LEVEL, 20):
            return
        self.seq += 1
        doc = {
            "seq": self.seq,
            "component": self.component,
            "level": level,
            "event": event,
            "details": details or {}
        }
        if settings.LOG_CONSOLE:
            print(f"[{level}] {event}")
        if self.sink is None:
            return
        try:
            with open(self.sink, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(doc, sort_keys=True, default=str) + "\n")
        except OSError as e:
            print(f"[ERROR] Could not save audit log: {e}")

# Shared instance; the runner attaches it to the active run directory
audit_log = AuditLogger("kandy")
