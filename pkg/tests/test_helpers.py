import logging

from ltv_sentinel.helpers import (
    create_directory,
    create_file,
    get_files_in_dir,
    get_thread_cap,
    write_atomic,
    write_files_atomic,
)
from ltv_sentinel.logger import setup_logger


def test_create_directory_and_file(tmp_path):
    nested = tmp_path / "a" / "b"
    create_directory(str(nested))
    assert nested.is_dir()
    create_file(nested / "empty.txt")
    assert (nested / "empty.txt").read_text() == ""


def test_get_files_in_dir(tmp_path):
    for name in ("b.csv", "a.csv", "notes.json"):
        (tmp_path / name).write_text("x")
    (tmp_path / "sub").mkdir()
    assert [path.name for path in get_files_in_dir(tmp_path)] == ["a.csv", "b.csv", "notes.json"]
    assert [path.name for path in get_files_in_dir(tmp_path, "*.csv")] == ["a.csv", "b.csv"]
    assert get_files_in_dir(tmp_path / "missing") == []


def test_write_atomic_replaces_content(tmp_path):
    path = tmp_path / "out" / "metrics.csv"
    write_atomic(path, "old\n")
    write_atomic(str(path), "new\n")
    assert path.read_text() == "new\n"
    assert [item.name for item in path.parent.iterdir()] == ["metrics.csv"]


def test_write_files_atomic_orders_by_name(tmp_path):
    written = write_files_atomic(tmp_path, {"trace.csv": "k\n", "manifest.json": "{}\n"})
    assert [path.name for path in written] == ["manifest.json", "trace.csv"]
    assert (tmp_path / "trace.csv").read_bytes() == b"k\n"


def test_get_thread_cap(monkeypatch):
    monkeypatch.delenv("LTV_SENTINEL_THREADS", raising=False)
    assert get_thread_cap() == 1
    assert get_thread_cap(default=4) == 4
    monkeypatch.setenv("LTV_SENTINEL_THREADS", "8")
    assert get_thread_cap() == 8
    monkeypatch.setenv("LTV_SENTINEL_THREADS", "0")
    assert get_thread_cap() == 1
    monkeypatch.setenv("LTV_SENTINEL_THREADS", "many")
    assert get_thread_cap(default=2) == 2


def test_setup_logger(tmp_path):
    logger = setup_logger("ltv_sentinel_test", level="info", logs_dir=tmp_path)
    assert logger.level == logging.INFO
    assert (tmp_path / "ltv_sentinel_test_logfile.log").exists()
    assert setup_logger("ltv_sentinel_test", level="debug", logs_dir=tmp_path) is logger
    assert logger.level == logging.INFO
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)
