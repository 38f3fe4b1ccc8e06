import pytest

from suspension import acceptance


@pytest.mark.slow
@pytest.mark.parametrize("fn", acceptance.CHECKS, ids=lambda f: f.__name__)
def test_criterion(fn, capsys):
    k = acceptance.CHECKS.index(fn) + 1
    (c,) = acceptance.run({k}, echo=None)
    with capsys.disabled():
        print("\n" + c.line())
    assert c.passed, c.detail
