import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from doafusion.grid import ArrayGeometry, build_halfsphere_grid
from doafusion.simulate import default_paper_scenario


@pytest.fixture(scope="session")
def grid4():
    return build_halfsphere_grid(4)


@pytest.fixture(scope="session")
def geom():
    return ArrayGeometry()


@pytest.fixture()
def scenario():
    return default_paper_scenario()
