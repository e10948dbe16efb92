"""Acceptance checklist A1-A10.

Each criterion runs as its own test and prints one ``A<n> PASS|FAIL`` line.
The trained artifacts are cached under ``$UNIRECON_ACCEPT_DIR`` when set
(reused across sessions), otherwise under a session temp directory.
"""
import os

import pytest

from unirecon.acceptance import CRITERIA, AcceptanceContext, run_criterion

pytestmark = pytest.mark.slow


@pytest.fixture(scope="session")
def accept_ctx(tmp_path_factory):
    root = os.environ.get("UNIRECON_ACCEPT_DIR") or tmp_path_factory.mktemp("accept")
    return AcceptanceContext(root=root)


@pytest.mark.parametrize("name", list(CRITERIA))
def test_criterion(accept_ctx, name, capsys):
    res = run_criterion(accept_ctx, name)
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.line()
