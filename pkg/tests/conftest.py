from __future__ import annotations

import json
import threading

import pytest

from scribebench.llm_client import ChatClient, ClientConfig
from scribebench.mock_endpoint import MockEndpoint, as_transport, chat_body, clinic_responder


class Scripted:
    """Replies from a fixed list, in call order; the last entry repeats."""

    def __init__(self, *replies):
        self.replies = list(replies)
        self.calls: list[dict] = []
        self._lock = threading.Lock()

    def __call__(self, path, payload):
        with self._lock:
            self.calls.append(payload)
            reply = self.replies[min(len(self.calls) - 1, len(self.replies) - 1)]
        if isinstance(reply, tuple):
            status, content = reply
            return status, chat_body(content) if status == 200 else {"error": content}
        return 200, chat_body(reply)


@pytest.fixture
def make_client(tmp_path):
    """Build a ChatClient over an in-process transport; backoff sleeps are recorded, not slept."""

    def factory(responder=clinic_responder, cache=True, **cfg):
        sleeps: list[float] = []
        cfg.setdefault("backoff_base", 0.01)
        client = ChatClient(
            ClientConfig(base_url="http://mock", cache_dir=str(tmp_path / "cache") if cache else None, **cfg),
            transport=as_transport(responder),
            sleep=sleeps.append,
        )
        client.sleeps = sleeps
        return client

    return factory


@pytest.fixture
def clinic_server():
    with MockEndpoint(clinic_responder) as ep:
        yield ep


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


# --- acceptance summary -------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "_acceptance", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        prev = _ACCEPTANCE.get(number)
        if prev is None or prev[1] == "PASS":
            _ACCEPTANCE[number] = (title, outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        report._acceptance = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcome = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{outcome}] criterion {number}: {title}")
