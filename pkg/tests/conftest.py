from __future__ import annotations

import pytest

from qkdnet import cli


@pytest.fixture(scope="session")
def madqci_text() -> str:
    return cli.resolve_scenario("madqci.scenario")


@pytest.fixture(scope="session")
def madqci_model(madqci_text):
    from qkdnet import netmodel

    return netmodel.load_scenario(madqci_text)
