from pathlib import Path

import pytest

from fogorch.bench import data_path
from fogorch.mesh import build_full_mesh, load_node_table

DATA = Path(__file__).parent / "data"


@pytest.fixture
def worker04_text():
    return (DATA / "worker04.conf").read_text()


@pytest.fixture
def table_nodes():
    return load_node_table(data_path("topology.tsv").read_text())


@pytest.fixture
def table_mesh(table_nodes):
    return build_full_mesh(table_nodes, "192.0.0.0/24", 4999)
