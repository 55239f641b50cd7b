import contextlib

import numpy as np
import pytest

FD_EPS = 1e-4
FD_RTOL = 1e-4
FD_ATOL = 1e-7

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def numeric_grad(f, x: np.ndarray, eps: float = FD_EPS, index=None) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. array x (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.ndindex(x.shape) if index is None else index
    for idx in it:
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=FD_RTOL, atol=FD_ATOL):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    bound = np.maximum(rtol * np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    worst = np.unravel_index(np.argmax(err - bound), err.shape) if err.size else None
    assert np.all(err <= bound), (
        f"gradient mismatch at {worst}: analytic={analytic[worst]!r} numeric={numeric[worst]!r}"
    )


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record one acceptance criterion's outcome for the end-of-run summary."""
    detail = {"text": ""}
    try:
        yield detail
    except BaseException as exc:
        _ACCEPTANCE[number] = (title, False, detail["text"] or f"{type(exc).__name__}: {exc}".splitlines()[0])
        raise
    _ACCEPTANCE[number] = (title, True, detail["text"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, text = _ACCEPTANCE[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}"
        if text:
            line += f" -- {text}"
        terminalreporter.write_line(line)
