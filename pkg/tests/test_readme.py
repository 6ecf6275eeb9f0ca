import re
from pathlib import Path

import pytest

from diffusmooth import Grid1D, InitialLaw, MeasurementSet, SdeModel, \
    solve_backward, solve_forward

README = Path(__file__).resolve().parents[1] / "README.md"


def test_quickstart_block_executes():
    blocks = re.findall(r"```python\n(.*?)```", README.read_text(), re.S)
    assert blocks
    ns: dict = {}
    exec(blocks[0], ns)  # noqa: S102 - executing our own documentation
    m, S = ns["var"].trajectory.moments_at(0.2)
    assert 0.5 < m < 1.5 and 0.0 < S < 0.1


def test_measurements_beyond_horizon_rejected():
    model = SdeModel.ou(1.0, 0.3)
    law = InitialLaw("normal", 0.0, 0.2)
    meas = MeasurementSet((0.5,), (0.1,), 0.1)
    grid = Grid1D(-2.0, 2.0, 400, 1e-3)
    with pytest.raises(ValueError, match="horizon"):
        solve_forward(model, law, meas, grid, T=0.3)
    with pytest.raises(ValueError, match="horizon"):
        solve_backward(model, meas, grid, T=0.3)
