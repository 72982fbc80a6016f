"""
Logging system for SMAR
Central log manager with console, rotating file and in-memory queue handlers,
plus activity loggers that attach structured `extra` fields to every record.
"""

import logging
import logging.handlers
import sys
import threading
from collections import deque
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import psutil

from .config import settings

_RESERVED = {
    'name', 'msg', 'args', 'levelname', 'levelno', 'pathname', 'filename', 'module',
    'exc_info', 'exc_text', 'stack_info', 'lineno', 'funcName', 'created', 'msecs',
    'relativeCreated', 'thread', 'threadName', 'processName', 'process', 'taskName',
    'message', 'asctime',
}


class LogQueueHandler(logging.Handler):
    """Keeps the most recent records in memory for inspection"""

    def __init__(self, max_logs: int = 1000):
        super().__init__()
        self.log_queue = deque(maxlen=max_logs)
        self.lock = threading.Lock()

    def emit(self, record):
        try:
            log_entry = {
                'timestamp': datetime.fromtimestamp(record.created).isoformat(),
                'level': record.levelname,
                'logger': record.name,
                'message': record.getMessage(),
                'module': record.module,
                'function': record.funcName,
                'line': record.lineno,
            }

            extra_attrs = {k: v for k, v in record.__dict__.items() if k not in _RESERVED}
            if extra_attrs:
                log_entry['extra'] = extra_attrs

            with self.lock:
                self.log_queue.append(log_entry)
        except Exception:
            self.handleError(record)

    def get_recent_logs(self, limit: int = 100) -> list:
        with self.lock:
            return list(self.log_queue)[-limit:]

    def get_logs_by_category(self, category: str, limit: int = 100) -> list:
        with self.lock:
            filtered = [log for log in self.log_queue if log.get('extra', {}).get('category') == category]
            return filtered[-limit:]

    def clear_logs(self):
        with self.lock:
            self.log_queue.clear()


class DatasetActivityLogger:
    """Logger for dataset generation, ingest and validation"""

    def __init__(self, logger_name: str = "smar.data"):
        self.logger = logging.getLogger(logger_name)

    def log_generated(self, n_queries: int, n_candidates: int, seed: int, modalities: List[str]):
        extra = {
            'n_queries': n_queries,
            'n_candidates': n_candidates,
            'seed': seed,
            'modalities': modalities,
            'category': 'dataset',
        }
        self.logger.info(
            f"Dataset Generated: {n_queries} queries, {n_candidates} candidates (seed {seed})", extra=extra
        )

    def log_ingest(self, path: str, n_queries: int, success: bool = True, error: Optional[str] = None):
        extra = {'path': path, 'n_queries': n_queries, 'success': success, 'category': 'dataset'}
        if success:
            self.logger.info(f"Dataset Ingested: {path} ({n_queries} queries)", extra=extra)
        else:
            extra['error_message'] = error
            self.logger.error(f"Dataset Ingest Failed: {path} - {error}", extra=extra)

    def log_validation(self, n_queries: int, n_violations: int):
        extra = {'n_queries': n_queries, 'n_violations': n_violations, 'category': 'validation'}
        if n_violations:
            self.logger.warning(f"Validation: {n_violations} violations in {n_queries} queries", extra=extra)
        else:
            self.logger.info(f"Validation: {n_queries} queries valid", extra=extra)


class AnnotationActivityLogger:
    """Logger for annotation strategies"""

    def __init__(self, logger_name: str = "smar.annotate"):
        self.logger = logging.getLogger(logger_name)

    def log_plan(self, strategy: str, n_labeled: int, n_unlabeled: int, oracle_calls: int):
        total = n_labeled + n_unlabeled
        fraction = n_labeled / total if total else 0.0
        extra = {
            'strategy': strategy,
            'n_labeled': n_labeled,
            'n_unlabeled': n_unlabeled,
            'oracle_calls': oracle_calls,
            'labeled_fraction': fraction,
            'category': 'annotation',
        }
        self.logger.info(
            f"Annotation Plan: {strategy} labeled {n_labeled}/{total} ({fraction:.1%}), "
            f"{oracle_calls} oracle calls",
            extra=extra,
        )


class TrainingActivityLogger:
    """Logger for training runs"""

    def __init__(self, logger_name: str = "smar.train"):
        self.logger = logging.getLogger(logger_name)

    def log_run_start(self, run_id: str, n_queries: int, objective: str, config: Dict[str, Any]):
        extra = {
            'run_id': run_id,
            'n_queries': n_queries,
            'objective': objective,
            'config': config,
            'category': 'training',
        }
        self.logger.info(f"Training Started: {run_id} on {n_queries} queries ({objective})", extra=extra)

    def log_epoch(self, run_id: str, epoch: int, loss: float, duration: float,
                  validation_ndcg: Optional[float] = None):
        extra = {
            'run_id': run_id,
            'epoch': epoch,
            'loss': loss,
            'duration': duration,
            'validation_ndcg': validation_ndcg,
            'category': 'training',
        }
        message = f"Epoch {epoch}: {run_id} loss {loss:.6f} ({duration:.2f}s)"
        if validation_ndcg is not None:
            message += f" - val NDCG {validation_ndcg:.4f}"
        self.logger.debug(message, extra=extra)

    def log_divergence(self, run_id: str, epoch: int, loss: float):
        extra = {'run_id': run_id, 'epoch': epoch, 'loss': loss, 'category': 'training'}
        self.logger.error(f"Training Diverged: {run_id} at epoch {epoch} (loss {loss})", extra=extra)

    def log_run_end(self, run_id: str, initial_loss: float, final_loss: float, duration: float):
        extra = {
            'run_id': run_id,
            'initial_loss': initial_loss,
            'final_loss': final_loss,
            'duration': duration,
            'category': 'training',
        }
        self.logger.info(
            f"Training Completed: {run_id} loss {initial_loss:.4f} -> {final_loss:.4f} in {duration:.2f}s",
            extra=extra,
        )


class ExperimentActivityLogger:
    """Logger for experiment pipelines"""

    def __init__(self, logger_name: str = "smar.experiment"):
        self.logger = logging.getLogger(logger_name)

    def log_experiment_start(self, kind: str, n_cells: int, config_hash: str, workers: int):
        extra = {
            'kind': kind,
            'n_cells': n_cells,
            'config_hash': config_hash,
            'workers': workers,
            'category': 'experiment',
        }
        self.logger.info(
            f"Experiment Started: {kind} with {n_cells} cells (config {config_hash}, {workers} workers)",
            extra=extra,
        )

    def log_cell(self, kind: str, cell_id: str, duration: float, resumed: bool = False):
        extra = {'kind': kind, 'cell_id': cell_id, 'duration': duration, 'resumed': resumed, 'category': 'experiment'}
        if resumed:
            self.logger.info(f"Cell Resumed: {cell_id}", extra=extra)
        else:
            self.logger.info(f"Cell Finished: {cell_id} in {duration:.2f}s", extra=extra)

    def log_excluded(self, metric: str, n_excluded: int, reason: str):
        extra = {'metric': metric, 'n_excluded': n_excluded, 'reason': reason, 'category': 'metrics'}
        self.logger.warning(f"Metric {metric}: {n_excluded} queries excluded ({reason})", extra=extra)

    def log_experiment_end(self, kind: str, n_rows: int, duration: float, success: bool = True,
                           error: Optional[str] = None):
        rss_mb = psutil.Process().memory_info().rss / (1024 * 1024)
        extra = {
            'kind': kind,
            'n_rows': n_rows,
            'duration': duration,
            'rss_mb': rss_mb,
            'success': success,
            'category': 'experiment',
        }
        if success:
            self.logger.info(
                f"Experiment Completed: {kind} - {n_rows} rows in {duration:.2f}s (rss {rss_mb:.0f} MB)",
                extra=extra,
            )
        else:
            extra['error_message'] = error
            self.logger.error(f"Experiment Failed: {kind} - {error}", extra=extra)


class SystemLogger:
    """Logger for command-level events"""

    def __init__(self, logger_name: str = "smar.system"):
        self.logger = logging.getLogger(logger_name)

    def log_command_start(self, command: str, args: Dict[str, Any]):
        extra = {'command': command, 'args': args, 'category': 'command'}
        self.logger.info(f"Command Started: {command}", extra=extra)

    def log_command_end(self, command: str, exit_code: int, duration: float):
        extra = {'command': command, 'exit_code': exit_code, 'duration': duration, 'category': 'command'}
        status = "Completed" if exit_code == 0 else "Failed"
        message = f"Command {status}: {command} (exit {exit_code}, {duration:.2f}s)"
        if exit_code == 0:
            self.logger.info(message, extra=extra)
        else:
            self.logger.error(message, extra=extra)


class EnhancedLogManager:
    """Centralized log manager"""

    def __init__(self, log_dir: Optional[str] = None, level: Optional[str] = None,
                 max_bytes: int = 10485760, backup_count: int = 5):
        self.log_dir = Path(log_dir or settings.LOG_DIR)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.level = getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO)

        self.queue_handler = LogQueueHandler(max_logs=2000)
        self._setup_logging(max_bytes, backup_count)

        self.data_logger = DatasetActivityLogger()
        self.annotation_logger = AnnotationActivityLogger()
        self.training_logger = TrainingActivityLogger()
        self.experiment_logger = ExperimentActivityLogger()
        self.system_logger = SystemLogger()

    def _setup_logging(self, max_bytes: int, backup_count: int):
        detailed_formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(module)s:%(funcName)s:%(lineno)d - %(message)s'
        )
        simple_formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')

        smar_logger = logging.getLogger("smar")
        smar_logger.setLevel(self.level)
        smar_logger.handlers.clear()
        smar_logger.propagate = False

        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(max(self.level, logging.INFO))
        console_handler.setFormatter(simple_formatter)
        smar_logger.addHandler(console_handler)

        file_handler = logging.handlers.RotatingFileHandler(
            self.log_dir / "smar.log",
            maxBytes=max_bytes,
            backupCount=backup_count,
        )
        file_handler.setLevel(self.level)
        file_handler.setFormatter(detailed_formatter)
        smar_logger.addHandler(file_handler)

        self.queue_handler.setLevel(self.level)
        self.queue_handler.setFormatter(detailed_formatter)
        smar_logger.addHandler(self.queue_handler)

    def get_recent_logs(self, limit: int = 100, category: Optional[str] = None):
        if category:
            return self.queue_handler.get_logs_by_category(category, limit)
        return self.queue_handler.get_recent_logs(limit)

    def shutdown(self):
        smar_logger = logging.getLogger("smar")
        for handler in list(smar_logger.handlers):
            handler.close()
            smar_logger.removeHandler(handler)
        smar_logger.propagate = True


_log_manager = None


def get_log_manager(log_dir: Optional[str] = None, level: Optional[str] = None) -> EnhancedLogManager:
    """Get or create the global log manager"""
    global _log_manager
    if _log_manager is None:
        _log_manager = EnhancedLogManager(log_dir=log_dir, level=level)
    return _log_manager


def reset_log_manager():
    global _log_manager
    if _log_manager is not None:
        _log_manager.shutdown()
    _log_manager = None


def get_logger(name: str):
    return logging.getLogger(name)


data_log = DatasetActivityLogger()
annotation_log = AnnotationActivityLogger()
training_log = TrainingActivityLogger()
experiment_log = ExperimentActivityLogger()
system_log = SystemLogger()
