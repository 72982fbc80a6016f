"""
Tests for the log manager and the activity loggers
"""

import logging

from smar.logger import (
    LogQueueHandler,
    annotation_log,
    data_log,
    experiment_log,
    get_log_manager,
    reset_log_manager,
    system_log,
    training_log,
)


def test_records_reach_the_queue_with_extras(tmp_path):
    manager = get_log_manager(str(tmp_path), "DEBUG")
    data_log.log_generated(12, 80, 5, ["natural", "video"])
    annotation_log.log_plan("top-p", 3, 9, 3)

    logs = manager.get_recent_logs()
    assert [entry["logger"] for entry in logs] == ["smar.data", "smar.annotate"]
    assert logs[0]["extra"]["seed"] == 5
    assert logs[1]["extra"]["labeled_fraction"] == 0.25
    assert "3/12 (25.0%)" in logs[1]["message"]


def test_category_filter(tmp_path):
    manager = get_log_manager(str(tmp_path), "DEBUG")
    training_log.log_run_start("run", 10, "listwise", {"epochs": 3})
    training_log.log_epoch("run", 0, 1.5, 0.01, validation_ndcg=0.5)
    experiment_log.log_cell("anchors", "T=1|1", 0.2)
    system_log.log_command_start("eval", {"k": 10})

    training = manager.get_recent_logs(category="training")
    assert len(training) == 2
    assert "val NDCG 0.5000" in training[1]["message"]
    assert len(manager.get_recent_logs(category="experiment")) == 1
    assert len(manager.get_recent_logs(limit=1)) == 1


def test_debug_records_respect_the_level(tmp_path):
    manager = get_log_manager(str(tmp_path), "INFO")
    training_log.log_epoch("run", 0, 1.5, 0.01)
    assert manager.get_recent_logs(category="training") == []


def test_failures_log_at_error(tmp_path):
    manager = get_log_manager(str(tmp_path), "INFO")
    experiment_log.log_experiment_end("budget-sweep", 0, 1.0, success=False, error="stage 'train' failed")
    system_log.log_command_end("train", 2, 0.5)

    levels = [entry["level"] for entry in manager.get_recent_logs()]
    assert levels == ["ERROR", "ERROR"]
    assert manager.get_recent_logs()[0]["extra"]["rss_mb"] > 0


def test_file_handler_writes_under_log_dir(tmp_path):
    get_log_manager(str(tmp_path), "INFO")
    data_log.log_validation(4, 1)
    reset_log_manager()
    text = (tmp_path / "smar.log").read_text(encoding="utf-8")
    assert "Validation: 1 violations in 4 queries" in text


def test_manager_is_shared_until_reset(tmp_path):
    first = get_log_manager(str(tmp_path))
    assert get_log_manager() is first
    reset_log_manager()
    assert get_log_manager(str(tmp_path)) is not first
    assert logging.getLogger("smar").propagate is False


def test_queue_handler_is_bounded():
    handler = LogQueueHandler(max_logs=3)
    logger = logging.getLogger("smar.test.queue")
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    try:
        for i in range(5):
            logger.info(f"message {i}", extra={"category": "test"})
    finally:
        logger.removeHandler(handler)

    assert [entry["message"] for entry in handler.get_recent_logs()] == ["message 2", "message 3", "message 4"]
    assert len(handler.get_logs_by_category("test", limit=2)) == 2
    handler.clear_logs()
    assert handler.get_recent_logs() == []
