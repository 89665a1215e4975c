import pytest

from core.keystore import CarKeyId, CipherParams, StrongSource, new_key_table

TOY = CipherParams(word_bits=4, sum_count=2, table_size=8)
CAR_ID = CarKeyId(0x1234ABCD)


@pytest.fixture
def full_table():
    return new_key_table(StrongSource(101))


@pytest.fixture
def toy_table():
    return new_key_table(StrongSource(102), TOY)


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("RKESIM_OUTPUT_DIR", str(tmp_path))
    return tmp_path
