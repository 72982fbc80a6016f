"""
Progress tracking for experiment runs
Finished cells are saved to <out-dir>/progress.json so an interrupted
experiment resumes where it stopped.
"""

import json
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .logger import get_logger

logger = get_logger("smar.progress")

PROGRESS_FILE = "progress.json"


class ExperimentProgress:
    """Manages cell results for one experiment config (identified by its hash)"""

    def __init__(self, out_dir: Union[str, Path], config_hash: str, kind: str):
        self.progress_file = Path(out_dir) / PROGRESS_FILE
        self.config_hash = config_hash
        self.kind = kind
        self.default_data = {
            "kind": kind,
            "config_hash": config_hash,
            "cells": {},
            "last_update": None,
            "is_running": False,
        }
        self.data = self.load_progress()

    def load_progress(self) -> Dict[str, Any]:
        """Load progress from file; a file written for another config is ignored"""
        if not self.progress_file.exists():
            return json.loads(json.dumps(self.default_data))
        try:
            with open(self.progress_file, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning(f"⚠️ Ignoring unreadable progress file {self.progress_file}: {e}",
                           extra={"category": "experiment"})
            return json.loads(json.dumps(self.default_data))

        if data.get("config_hash") != self.config_hash or data.get("kind") != self.kind:
            logger.info(f"Progress file {self.progress_file} belongs to another config, starting fresh",
                        extra={"category": "experiment"})
            return json.loads(json.dumps(self.default_data))

        progress = json.loads(json.dumps(self.default_data))
        progress.update(data)
        # an interrupted run left is_running set
        progress["is_running"] = False
        return progress

    def save_progress(self):
        self.data["last_update"] = datetime.now().isoformat()
        self.progress_file.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.progress_file.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=2)
        os.replace(tmp, self.progress_file)

    def mark_start(self):
        self.data["is_running"] = True
        self.save_progress()

    def mark_stop(self):
        self.data["is_running"] = False
        self.save_progress()

    def cell_result(self, cell_id: str) -> Optional[List[Dict[str, Any]]]:
        return self.data["cells"].get(cell_id)

    def record_cell(self, cell_id: str, rows: List[Dict[str, Any]]):
        self.data["cells"][cell_id] = rows
        self.save_progress()

    @property
    def completed(self) -> int:
        return len(self.data["cells"])

    def reset_progress(self):
        self.data = json.loads(json.dumps(self.default_data))
        self.save_progress()

    def finish(self):
        """Drop the progress file once the report is written"""
        self.data["is_running"] = False
        if self.progress_file.exists():
            self.progress_file.unlink()
