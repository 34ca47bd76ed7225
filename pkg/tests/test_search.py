import logging

import pytest

from rosa.errors import InputError
from rosa.model import Mode, forward_batch, model_output_error
from rosa import search
from rosa.rotation import rotate_model
from rosa.search import SearchSpace, grid_search
from rosa.sparsify import SparsityPlan


@pytest.fixture(scope="module")
def rotated(tiny_model, tiny_calib):
    return rotate_model(tiny_model, tiny_calib)


def test_default_grid_is_121_points():
    space = SearchSpace()
    axis = space.axis(space.alpha1_range)
    assert len(axis) == 11 and axis[0] == 0.7 and axis[-1] == 1.2
    # integer multiples of the step, no drift
    assert axis == [round(0.7 + 0.05 * i, 12) for i in range(11)]
    assert len(space.points()) == 121 and len(set(space.points())) == 121


def test_space_rejects():
    with pytest.raises(InputError):
        SearchSpace(step=0.0)
    with pytest.raises(InputError):
        SearchSpace(alpha1_range=(1.0, 0.9))


def test_grid_search_small(tiny_model, rotated, tiny_eval, tiny_calib):
    space = SearchSpace(alpha1_range=(0.9, 1.1), alpha3_range=(0.9, 1.1), step=0.1)
    result = grid_search(tiny_model, rotated, tiny_eval, 0.5, space, calib_seqs=tiny_calib)
    assert len(result.trace) == 9
    best = min(result.trace, key=lambda r: r[4])
    assert result.objective == best[4]
    uniform = [r for r in result.trace if r[0] == 1.0 and r[2] == 1.0][0]
    assert result.objective <= uniform[4]
    dense = forward_batch(tiny_model, tiny_eval, Mode.DENSE)
    plan = SparsityPlan(0.5, result.alpha, tiny_model.config.mlp_ratio)
    recomputed = model_output_error(forward_batch(rotated, tiny_eval, Mode.LAROSA, plan), dense).mean
    assert recomputed == result.objective
    lines = result.trace_csv().splitlines()
    assert lines[0] == "alpha1,alpha2,alpha3,alpha4,objective" and len(lines) == 10


def test_grid_search_deterministic(tiny_model, rotated, tiny_eval):
    space = SearchSpace(alpha1_range=(0.9, 1.0), alpha3_range=(0.9, 1.0), step=0.1)
    a = grid_search(tiny_model, rotated, tiny_eval, 0.4, space)
    b = grid_search(tiny_model, rotated, tiny_eval, 0.4, space)
    assert a.alpha == b.alpha and a.trace == b.trace


def test_ties_keep_first_point(tiny_model, rotated, tiny_eval, monkeypatch):
    monkeypatch.setattr(search, "evaluate_plan", lambda *_: 0.25)
    space = SearchSpace(alpha1_range=(0.9, 1.0), alpha3_range=(0.9, 1.0), step=0.1)
    result = grid_search(tiny_model, rotated, tiny_eval, 0.5, space)
    assert len(result.trace) == 4
    assert (result.alpha[0], result.alpha[2]) == (0.9, 0.9)


def test_infeasible_points_skipped(tiny_model, rotated, tiny_eval, caplog):
    space = SearchSpace(alpha1_range=(1.3, 1.4), alpha3_range=(1.0, 1.0), step=0.1)
    with caplog.at_level(logging.WARNING):
        result = grid_search(tiny_model, rotated, tiny_eval, 0.5, space)
    assert [r[0] for r in result.trace] == [1.3]
    assert "skipping" in caplog.text


def test_rejects_overlapping_eval(tiny_model, rotated, tiny_calib):
    with pytest.raises(InputError):
        grid_search(tiny_model, rotated, tiny_calib[:1], 0.5, calib_seqs=tiny_calib)


@pytest.mark.parametrize("p", [0.0, 1.0])
def test_rejects_degenerate_p(tiny_model, rotated, tiny_eval, p):
    with pytest.raises(InputError):
        grid_search(tiny_model, rotated, tiny_eval, p)
