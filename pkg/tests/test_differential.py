import pytest

from differential import SEEDS, agreement, run


@pytest.fixture(scope="module")
def results():
    return run()


@pytest.mark.parametrize("bits", [32, 64])
def test_pooled_agreement(results, bits):
    assert agreement(results[bits]) >= 0.999


@pytest.mark.parametrize("bits", [32, 64])
@pytest.mark.parametrize("seed", SEEDS)
def test_per_seed_agreement(results, bits, seed):
    r = results[bits]
    bad = sum(1 for m in r["mismatches"] if m["seed"] == seed)
    assert 1 - bad / r["per_seed"][seed] >= 0.999


@pytest.mark.parametrize("bits", [32, 64])
def test_no_untriaged_disagreements(results, bits):
    other = [m for m in results[bits]["mismatches"] if m["family"] == "other"]
    assert not other, other[:5]
