import pytest

from gradient_cases import CASES, run_case


@pytest.mark.parametrize("variant", [0, 1, 2])
@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name, variant):
    assert run_case(name, variant) <= 1e-4
