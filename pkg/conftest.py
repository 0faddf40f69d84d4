"""Repo-root conftest: puts the repository on sys.path so test modules can
share fixtures across files (tests.test_iface helpers)."""
