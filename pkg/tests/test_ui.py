import pytest

from crossing_tool.ui import FORCE_TERMINAL_ENV, force_terminal_setting


@pytest.mark.parametrize(
    ("value", "expected"),
    [("1", True), ("yes", True), ("0", False), ("False", False), ("", None), ("maybe", None)],
)
def test_force_terminal_setting(monkeypatch, value, expected):
    monkeypatch.setenv(FORCE_TERMINAL_ENV, value)
    assert force_terminal_setting() is expected


def test_force_terminal_defaults_to_detection(monkeypatch):
    monkeypatch.delenv(FORCE_TERMINAL_ENV, raising=False)
    assert force_terminal_setting() is None
