import logging

import pytest

from gkv.block_mapping import EdgeGeometry, MappingResolution, build_mappings, generate_mapping_grids
from gkv.phase_space import GridLevel, SpeciesParams, build_phase_grid

logging.getLogger("gkv").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def default_mapping():
    mg = generate_mapping_grids()
    return mg, build_mappings(mg)


@pytest.fixture(scope="session")
def small_mapping():
    mg = generate_mapping_grids(res=MappingResolution(8, 64, 3, 4))
    return mg, build_mappings(mg)


@pytest.fixture(scope="session")
def grid1(default_mapping):
    mg, maps = default_mapping
    return build_phase_grid(mg.geometry, maps, GridLevel.from_level(1))


@pytest.fixture(scope="session")
def species():
    return SpeciesParams()


@pytest.fixture(scope="session")
def geometry():
    return EdgeGeometry()


@pytest.fixture(scope="session")
def stencils1(grid1):
    from gkv.multiblock_exchange import build_ghost_stencils
    return build_ghost_stencils(grid1)
