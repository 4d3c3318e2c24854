import re

import pytest

from cacseg.timing import Overhead, time_overhead
from cacseg.train import full_config, train


def test_overhead_measurement(tiny_sets):
    tr, va = tiny_sets
    ckpt, _ = train(full_config(d=16, epochs=0), tr, va)
    t_original, t_cac, delta = time_overhead(ckpt, va, repeats=20)
    assert t_cac >= t_original > 0
    assert delta == round(delta, 3)


def test_format_reports_tenth_of_percent():
    text = Overhead(0.010, 0.0105, 0.05).format()
    assert re.search(r"delta \+5\.0%", text)


def test_too_few_repeats(tiny_sets):
    tr, va = tiny_sets
    ckpt, _ = train(full_config(d=16, epochs=0), tr, va)
    with pytest.raises(ValueError):
        time_overhead(ckpt, va, repeats=5)
