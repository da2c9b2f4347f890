# tests/conftest.py - FIXTURES PARTILHADAS
from pathlib import Path
from typing import Dict

import pytest

from services.data_model import ItemMeta, Session


CATALOG_HEADER = "item_id,locale,title,price,brand,color,size,model,material,author,desc\n"


def make_session(sid: str, items: str, label: str = None, locale: str = "UK") -> Session:
    return Session(sid, locale, tuple(items.split()), label)


@pytest.fixture
def write_file(tmp_path: Path):
    """Escreve um ficheiro de texto em tmp_path e devolve o caminho."""
    def _write(name: str, content: str) -> Path:
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
        return path
    return _write


@pytest.fixture
def tiny_catalog() -> Dict[str, ItemMeta]:
    return {
        "a": ItemMeta("a", "UK", title="red shoe", price=10.0, brand="Acme"),
        "b": ItemMeta("b", "UK", title="red sock", price=2.5, brand="Acme"),
        "c": ItemMeta("c", "UK", title="blue shoe", price=12.0, brand="Zed"),
        "d": ItemMeta("d", "UK", title="blue hat"),
        "e": ItemMeta("e", "UK", title="green hat", price=7.0),
    }


@pytest.fixture
def tiny_sessions():
    return [
        make_session("s1", "a b", "c"),
        make_session("s2", "b c", "d"),
        make_session("s3", "a c d", "e"),
        make_session("s4", "d", "e"),
        make_session("s5", "a", "b"),
        make_session("s6", "c e", "a"),
    ]
